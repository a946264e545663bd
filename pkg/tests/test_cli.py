import json

import pytest

from shardsim import SweepTable
from shardsim.cli import run


def invoke(capsys, *argv):
    code = run(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestParams:
    def test_vit_base_total(self, capsys):
        code, out, _ = invoke(capsys, "params", "--model", "vit-base",
                              "--format", "json")
        assert code == 0
        payload = json.loads(out)
        total = int(payload["grand_total"])
        assert abs(total - 87_000_000) / 87_000_000 < 0.025
        assert "relative_deviation" in payload

    def test_mae_model(self, capsys):
        code, out, _ = invoke(capsys, "params", "--model", "mae-base",
                              "--format", "json")
        assert code == 0
        assert "decoder_blocks_total" in json.loads(out)

    def test_unknown_preset_names_field(self, capsys):
        code, _, err = invoke(capsys, "params", "--model", "vit-7x")
        assert code != 0
        assert "model" in err

    def test_pretty_output(self, capsys):
        code, out, _ = invoke(capsys, "params", "--model", "vit-base")
        assert code == 0
        assert "grand_total" in out


class TestMemory:
    def test_vit3b_no_shard_near_capacity(self, capsys):
        code, out, _ = invoke(capsys, "memory", "--model", "vit-3b",
                              "--strategy", "no-shard", "--cluster", "frontier",
                              "--format", "json")
        assert code == 0
        payload = json.loads(out)
        total_gib = float(payload["total_gib"])
        # 16 B/param states plus the default activation model: > 55 GB,
        # within the 64 GiB budget, flagged near capacity.
        assert total_gib > 55e9 / 1024**3
        assert payload["feasible"] == "yes"
        assert payload["near_capacity"] == "yes"

    def test_infeasible_strategy_errors(self, capsys):
        code, _, err = invoke(capsys, "memory", "--model", "vit-base",
                              "--strategy", "hybrid16", "--nodes", "1")
        assert code != 0
        assert "strategy" in err


class TestSchedule:
    def test_task_graph_dump(self, capsys):
        code, out, _ = invoke(capsys, "schedule", "--model", "vit-base",
                              "--strategy", "full", "--nodes", "2")
        assert code == 0
        payload = json.loads(out)
        assert payload["strategy"] == "full"
        kinds = {t["kind"] for t in payload["tasks"]}
        assert {"compute", "all-gather", "reduce-scatter"} <= kinds
        ids = [t["id"] for t in payload["tasks"]]
        assert ids == sorted(ids)


class TestSimulate:
    def test_single_scenario_metrics(self, capsys):
        code, out, _ = invoke(capsys, "simulate", "--model", "vit-base",
                              "--strategy", "no-shard", "--nodes", "2",
                              "--format", "json")
        assert code == 0
        payload = json.loads(out)
        assert float(payload["step_seconds"]) > 0
        assert float(payload["images_per_second"]) > 0

    def test_io_rate_flag(self, capsys):
        code, out, _ = invoke(capsys, "simulate", "--model", "vit-base",
                              "--strategy", "no-shard", "--nodes", "1",
                              "--io-rate", "1", "--format", "json")
        assert code == 0
        payload = json.loads(out)
        assert float(payload["step_seconds"]) == pytest.approx(32.0)


class TestSweep:
    ARGS = ("sweep", "--model", "vit-5b",
            "--strategies", "full,hybrid2,hybrid8",
            "--nodes", "2,4,8,16,32", "--format", "csv")

    def test_row_cardinality(self, capsys):
        code, out, _ = invoke(capsys, *self.ARGS)
        assert code == 0
        table = SweepTable.from_csv(out)
        assert len(table.rows) == 15

    def test_csv_round_trip(self, capsys):
        _, out, _ = invoke(capsys, *self.ARGS)
        table = SweepTable.from_csv(out)
        assert table.to_csv() == out

    def test_deterministic_output(self, capsys):
        _, first, _ = invoke(capsys, *self.ARGS)
        _, second, _ = invoke(capsys, *self.ARGS)
        assert first == second

    def test_deterministic_across_processes(self, tmp_path):
        # Different hash seeds must not change a single byte of the CSV.
        import os
        import subprocess
        import sys
        outputs = []
        for seed in ("1", "4242"):
            env = dict(os.environ, PYTHONHASHSEED=seed)
            result = subprocess.run(
                [sys.executable, "-m", "shardsim", *self.ARGS],
                capture_output=True, env=env, check=True)
            outputs.append(result.stdout)
        assert outputs[0] == outputs[1]

    def test_infeasible_rows_marked_not_dropped(self, capsys):
        code, out, _ = invoke(capsys, "sweep", "--model", "vit-base",
                              "--strategies", "hybrid16", "--nodes", "1,2",
                              "--format", "csv")
        assert code == 0
        table = SweepTable.from_csv(out)
        assert len(table.rows) == 2
        assert not table.rows[0].feasible and table.rows[0].ips is None
        assert table.rows[1].feasible

    def test_output_file(self, capsys, tmp_path):
        path = tmp_path / "sweep.csv"
        code, out, _ = invoke(capsys, *self.ARGS, "--output", str(path))
        assert code == 0 and out == ""
        assert SweepTable.from_csv(path.read_text()).rows


class TestCalibrateCommand:
    def test_fit_from_observations_file(self, capsys, tmp_path):
        obs = [
            {"model": "mae-5b", "strategy": "hybrid2", "nodes": 32,
             "measured_ips": 1509.0},
            {"model": "mae-5b", "strategy": "full", "nodes": 32,
             "measured_ips": 1307.0},
        ]
        path = tmp_path / "obs.json"
        path.write_text(json.dumps(obs))
        code, out, _ = invoke(capsys, "calibrate", "--observations", str(path),
                              "--cluster", "frontier")
        assert code == 0
        payload = json.loads(out)
        assert 0 < payload["compute_efficiency"] <= 1
        assert payload["effective_latency_scale"] > 0
        assert payload["residual"] >= 0

    def test_malformed_json(self, capsys, tmp_path):
        path = tmp_path / "obs.json"
        path.write_text("{not json")
        code, _, err = invoke(capsys, "calibrate", "--observations", str(path))
        assert code != 0
        assert "observations" in err


class TestConfigFile:
    def test_config_supplies_defaults(self, capsys, tmp_path):
        config = {"model": "vit-base", "strategy": "no-shard", "nodes": 1}
        path = tmp_path / "run.json"
        path.write_text(json.dumps(config))
        code, out, _ = invoke(capsys, "simulate", "--config", str(path),
                              "--format", "json")
        assert code == 0
        assert float(json.loads(out)["images_per_second"]) > 0

    def test_conflicting_model_sources_rejected(self, capsys, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"model": "vit-base"}))
        code, _, err = invoke(capsys, "params", "--config", str(path),
                              "--model", "vit-3b")
        assert code != 0
        assert "model" in err

    def test_inline_model_config(self, capsys, tmp_path):
        config = {"model": {"width": 8, "depth": 1, "mlp": 16, "heads": 2,
                            "patch_size": 2, "image_size": 4}}
        path = tmp_path / "run.json"
        path.write_text(json.dumps(config))
        code, out, _ = invoke(capsys, "params", "--config", str(path),
                              "--format", "json")
        assert code == 0
        assert int(json.loads(out)["per_block"]) == 600

    def test_inline_model_simulates(self, capsys, tmp_path):
        config = {
            "model": {"encoder": {"width": 64, "depth": 2, "mlp": 128,
                                  "heads": 4, "patch_size": 8, "image_size": 64}},
            "strategy": "full", "nodes": 2,
        }
        path = tmp_path / "run.json"
        path.write_text(json.dumps(config))
        code, out, _ = invoke(capsys, "simulate", "--config", str(path),
                              "--format", "json")
        assert code == 0
        assert float(json.loads(out)["images_per_second"]) > 0


class TestOutputDirEnv:
    def test_relative_output_resolves_against_env(self, capsys, tmp_path,
                                                  monkeypatch):
        monkeypatch.setenv("SHARDSIM_OUTPUT_DIR", str(tmp_path))
        code, out, _ = invoke(capsys, "params", "--model", "vit-base",
                              "--format", "csv", "--output", "report.csv")
        assert code == 0 and out == ""
        assert (tmp_path / "report.csv").read_text().startswith("blocks_total,")

    def test_absolute_output_ignores_env(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("SHARDSIM_OUTPUT_DIR", str(tmp_path / "elsewhere"))
        target = tmp_path / "direct.csv"
        code, _, _ = invoke(capsys, "params", "--model", "vit-base",
                            "--format", "csv", "--output", str(target))
        assert code == 0
        assert target.exists()
