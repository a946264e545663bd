"""Command-line front end: config ingestion, subcommands, report emission.

Subcommands: params, memory, schedule, simulate, sweep, calibrate.  Inputs are
flags or a JSON run config (``--config``); outputs go to stdout or ``--output``
(relative paths resolve against ``$SHARDSIM_OUTPUT_DIR`` when set).  Exactly
one source may define the model and the cluster.  All validation failures name
the offending field and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .arch import CHECKPOINTED, FULL_CACHE, MAEConfig, ViTConfig, \
    get_model, mae_param_count, param_count, reference_report
from .cluster import CLUSTER_PRESETS, ClusterSpec, GiB
from .engine import IoModel, Scenario, calibrate, prepare_scenario, \
    run_scenario, sweep
from .errors import ConfigError, TopologyError
from .sharding import PrefetchPolicy, Strategy

ENV_OUTPUT_DIR = "SHARDSIM_OUTPUT_DIR"

FORMATS = ("pretty-table", "json", "csv")


class CLIError(Exception):
    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


def _load_json(path: str, field: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except FileNotFoundError:
        raise CLIError(field, f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CLIError(field, f"malformed JSON in {path}: {exc}")


def _merge_config(args: argparse.Namespace) -> dict:
    config = {}
    if getattr(args, "config", None):
        config = _load_json(args.config, "config")
        if not isinstance(config, dict):
            raise CLIError("config", "run config must be a JSON object")
    return config


def _pick(args: argparse.Namespace, config: dict, field: str, default=None):
    """Flag wins over config; both set and conflicting is an error."""
    flag = getattr(args, field.replace("-", "_"), None)
    if field in config and flag is not None and config[field] != flag:
        raise CLIError(field, "specified both on the command line and in --config")
    if flag is not None:
        return flag
    return config.get(field, default)


def _resolve_model(value, field: str = "model"):
    if value is None:
        raise CLIError(field, "a model preset name or inline config is required")
    if isinstance(value, str):
        try:
            return get_model(value)
        except ConfigError as exc:
            raise CLIError(field, str(exc))
    if isinstance(value, dict):
        try:
            fields = dict(value)
            if "encoder" in fields:
                encoder = ViTConfig(**fields.pop("encoder"))
                return MAEConfig(encoder=encoder, **fields)
            return ViTConfig(**fields)
        except (ConfigError, TypeError) as exc:
            raise CLIError(field, f"invalid inline model config: {exc}")
    raise CLIError(field, "must be a preset name or an inline object")


def _resolve_cluster(value, nodes: int, field: str = "cluster") -> ClusterSpec:
    if value is None:
        value = "frontier"
    if isinstance(value, str):
        preset = CLUSTER_PRESETS.get(value.lower())
        if preset is None:
            raise CLIError(field, f"unknown cluster preset {value!r}")
        return preset(nodes)
    if isinstance(value, dict):
        try:
            return ClusterSpec(**{**value, "num_nodes": nodes})
        except (ConfigError, TypeError) as exc:
            raise CLIError(field, f"invalid inline cluster spec: {exc}")
    raise CLIError(field, "must be a preset name or an inline object")


def _resolve_strategy(value, field: str = "strategy") -> Strategy:
    if value is None:
        raise CLIError(field, "a sharding strategy is required")
    try:
        return Strategy.parse(value)
    except ConfigError as exc:
        raise CLIError(field, str(exc))


def _resolve_policy(args, config) -> PrefetchPolicy:
    mode = _pick(args, config, "prefetch", "backward-pre")
    limit = _pick(args, config, "limit_all_gathers", True)
    inflight = _pick(args, config, "max_inflight", 2)
    try:
        return PrefetchPolicy(mode=mode, limit_all_gathers=bool(limit),
                              max_inflight=int(inflight))
    except ConfigError as exc:
        raise CLIError("prefetch", str(exc))


def _emit(text: str, output: str | None) -> None:
    if output is None:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
        return
    base = os.environ.get(ENV_OUTPUT_DIR)
    if base and not os.path.isabs(output):
        output = os.path.join(base, output)
    with open(output, "w", encoding="utf-8") as handle:
        handle.write(text)


def _gib(value: int | float) -> str:
    return f"{value / GiB:.2f}"


def _kv_table(rows: list[tuple[str, str]]) -> str:
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def _format_kv(rows: list[tuple[str, str]], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(dict(rows), indent=2)
    if fmt == "csv":
        return "\n".join(f"{k},{v}" for k, v in rows) + "\n"
    return _kv_table(rows)


def _cmd_params(args) -> str:
    config = _merge_config(args)
    model = _resolve_model(_pick(args, config, "model"))
    breakdown = mae_param_count(model) if isinstance(model, MAEConfig) \
        else param_count(model)
    rows = [(name, str(count)) for name, count in breakdown.components().items()
            if count]
    rows.append(("per_block", str(breakdown.per_block)))
    rows.append(("grand_total", str(breakdown.grand_total)))
    model_name = _pick(args, config, "model")
    if isinstance(model_name, str):
        for entry in reference_report():
            if entry["model"] == model_name.lower():
                rows.append(("nominal_total", str(int(entry["nominal"]))))
                rows.append(("relative_deviation",
                             f"{entry['relative_deviation']:+.4f}"))
    return _format_kv(rows, args.format)


def _cmd_memory(args) -> str:
    config = _merge_config(args)
    model_value = _pick(args, config, "model")
    model = _resolve_model(model_value)
    strategy = _resolve_strategy(_pick(args, config, "strategy"))
    nodes = int(_pick(args, config, "nodes", 1))
    cluster = _resolve_cluster(_pick(args, config, "cluster"), nodes)
    batch = int(_pick(args, config, "local_batch", 32))
    activation_model = _pick(args, config, "activation_model", CHECKPOINTED)
    if activation_model not in (CHECKPOINTED, FULL_CACHE):
        raise CLIError("activation_model", f"unknown model {activation_model!r}")
    scenario = Scenario(model=model if not isinstance(model_value, str) else model_value,
                        strategy=strategy, nodes=nodes, local_batch=batch)
    try:
        _, memory, _ = prepare_scenario(scenario, cluster, activation_model)
    except TopologyError as exc:
        raise CLIError("strategy", str(exc))
    near_capacity = memory.total_bytes > 0.8 * memory.hbm_bytes
    rows = [
        ("params_gib", _gib(memory.params_bytes)),
        ("grads_gib", _gib(memory.grads_bytes)),
        ("optimizer_gib", _gib(memory.optimizer_bytes)),
        ("activations_gib", _gib(memory.activations_bytes)),
        ("gathered_peak_gib", _gib(memory.gathered_peak_bytes)),
        ("total_gib", _gib(memory.total_bytes)),
        ("hbm_gib", _gib(memory.hbm_bytes)),
        ("feasible", "yes" if memory.feasible else "no"),
        ("near_capacity", "yes" if near_capacity else "no"),
    ]
    return _format_kv(rows, args.format)


def _cmd_schedule(args) -> str:
    config = _merge_config(args)
    model_value = _pick(args, config, "model")
    model = _resolve_model(model_value)
    strategy = _resolve_strategy(_pick(args, config, "strategy"))
    nodes = int(_pick(args, config, "nodes", 1))
    cluster = _resolve_cluster(_pick(args, config, "cluster"), nodes)
    batch = int(_pick(args, config, "local_batch", 32))
    policy = _resolve_policy(args, config)
    scenario = Scenario(model=model if not isinstance(model_value, str) else model_value,
                        strategy=strategy, nodes=nodes, local_batch=batch,
                        policy=policy)
    try:
        schedule, _, _ = prepare_scenario(scenario, cluster)
    except TopologyError as exc:
        raise CLIError("strategy", str(exc))
    return schedule.to_json(indent=2)


def _scenario_from(args, config) -> tuple[Scenario, ClusterSpec, IoModel | None]:
    model_value = _pick(args, config, "model")
    model = _resolve_model(model_value)
    strategy = _resolve_strategy(_pick(args, config, "strategy"))
    nodes = int(_pick(args, config, "nodes", 1))
    cluster = _resolve_cluster(_pick(args, config, "cluster"), nodes)
    batch = int(_pick(args, config, "local_batch", 32))
    policy = _resolve_policy(args, config)
    io_rate = _pick(args, config, "io_rate")
    io = IoModel(images_per_second_per_rank=float(io_rate)) if io_rate else None
    scenario = Scenario(model=model if not isinstance(model_value, str) else model_value,
                        strategy=strategy, nodes=nodes, local_batch=batch,
                        policy=policy)
    return scenario, cluster, io


def _cmd_simulate(args) -> str:
    config = _merge_config(args)
    scenario, cluster, io = _scenario_from(args, config)
    efficiency = _pick(args, config, "efficiency")
    latency_scale = float(_pick(args, config, "latency_scale", 1.0))
    try:
        metrics = run_scenario(scenario, cluster, io=io,
                               compute_efficiency=float(efficiency) if efficiency else None,
                               latency_scale=latency_scale)
    except TopologyError as exc:
        raise CLIError("strategy", str(exc))
    rows = [
        ("step_seconds", f"{metrics.step_seconds:.6f}"),
        ("images_per_second", f"{metrics.images_per_second:.1f}"),
        ("comm_seconds_exposed", f"{metrics.comm_seconds_exposed:.6f}"),
        ("comm_fraction", f"{metrics.comm_fraction:.4f}"),
        ("compute_seconds", f"{metrics.compute_seconds:.6f}"),
        ("io_seconds", f"{metrics.io_seconds:.6f}"),
        ("peak_gib", _gib(metrics.peak_memory.total_bytes)
         if metrics.peak_memory else ""),
        ("feasible", "yes" if metrics.feasible else "no"),
    ]
    return _format_kv(rows, args.format)


def _cmd_sweep(args) -> str:
    config = _merge_config(args)
    model_value = _pick(args, config, "model")
    if model_value is None:
        raise CLIError("model", "a model preset name is required")
    models = [m.strip() for m in str(model_value).split(",") if m.strip()]
    for name in models:
        _resolve_model(name)
    strategies_value = _pick(args, config, "strategies")
    if not strategies_value:
        raise CLIError("strategies", "a comma-separated strategy list is required")
    strategies = [_resolve_strategy(s.strip(), "strategies")
                  for s in str(strategies_value).split(",") if s.strip()]
    nodes_value = _pick(args, config, "nodes")
    if not nodes_value:
        raise CLIError("nodes", "a comma-separated node-count list is required")
    try:
        node_counts = [int(n) for n in str(nodes_value).split(",") if n.strip()]
    except ValueError:
        raise CLIError("nodes", f"not an integer list: {nodes_value!r}")
    cluster = _resolve_cluster(_pick(args, config, "cluster"), 1)
    batch = int(_pick(args, config, "local_batch", 32))
    policy = _resolve_policy(args, config)
    io_rate = _pick(args, config, "io_rate")
    io = IoModel(images_per_second_per_rank=float(io_rate)) if io_rate else None
    efficiency = _pick(args, config, "efficiency")
    latency_scale = float(_pick(args, config, "latency_scale", 1.0))
    table = sweep(models, strategies, node_counts, cluster, policy=policy,
                  local_batch=batch, io=io,
                  compute_efficiency=float(efficiency) if efficiency else None,
                  latency_scale=latency_scale)
    if args.format == "json":
        return table.to_json(indent=2)
    if args.format == "pretty-table":
        lines = [_CSV_PRETTY_HEADER]
        for row in table.rows:
            lines.append(
                f"{row.model:<10} {row.strategy:<9} {row.nodes:>6} "
                f"{'' if row.ips is None else f'{row.ips:.1f}':>12} "
                f"{'' if row.ideal_ips is None else f'{row.ideal_ips:.1f}':>12} "
                f"{'' if row.comm_fraction is None else f'{row.comm_fraction:.4f}':>9} "
                f"{'' if row.peak_gb is None else f'{row.peak_gb:.2f}':>9} "
                f"{'yes' if row.feasible else 'no':>8}")
        return "\n".join(lines)
    return table.to_csv()


_CSV_PRETTY_HEADER = (f"{'model':<10} {'strategy':<9} {'nodes':>6} {'ips':>12} "
                      f"{'ideal_ips':>12} {'comm':>9} {'peak_gb':>9} {'feasible':>8}")


def _cmd_calibrate(args) -> str:
    config = _merge_config(args)
    obs_path = _pick(args, config, "observations")
    if not obs_path:
        raise CLIError("observations", "an observations JSON file is required")
    payload = _load_json(obs_path, "observations")
    if not isinstance(payload, list) or not payload:
        raise CLIError("observations", "expected a non-empty JSON list")
    cluster = _resolve_cluster(_pick(args, config, "cluster"), 1)
    observations = []
    for i, entry in enumerate(payload):
        field = f"observations[{i}]"
        if not isinstance(entry, dict) or "measured_ips" not in entry:
            raise CLIError(field, "each entry needs scenario fields and measured_ips")
        try:
            scenario = Scenario(
                model=entry["model"],
                strategy=Strategy.parse(entry["strategy"]),
                nodes=int(entry["nodes"]),
                local_batch=int(entry.get("local_batch", 32)),
            )
            _resolve_model(entry["model"], field)
        except (KeyError, ConfigError) as exc:
            raise CLIError(field, str(exc))
        observations.append((scenario, float(entry["measured_ips"])))
    fitted = calibrate(observations, cluster)
    return json.dumps({
        "compute_efficiency": fitted.compute_efficiency,
        "effective_latency_scale": fitted.effective_latency_scale,
        "residual": fitted.residual,
    }, indent=2)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shardsim",
        description="Plan and simulate sharded data-parallel ViT training steps.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *, model=True, run=False) -> None:
        p.add_argument("--config", help="JSON run config supplying defaults")
        p.add_argument("--format", choices=FORMATS, default="pretty-table")
        p.add_argument("--output", help="write the report to this path")
        if model:
            p.add_argument("--model", help="model preset, e.g. vit-3b or mae-3b")
        if run:
            p.add_argument("--strategy", help="no-shard|full|grad-op|hybridN|ddp")
            p.add_argument("--cluster", help="cluster preset (frontier) or config")
            p.add_argument("--nodes", help="node count")
            p.add_argument("--local-batch", dest="local_batch", type=int)
            p.add_argument("--prefetch", choices=("none", "backward-post",
                                                  "backward-pre"))
            p.add_argument("--no-limit-all-gathers", dest="limit_all_gathers",
                           action="store_const", const=False)
            p.add_argument("--max-inflight", dest="max_inflight", type=int)

    p_params = sub.add_parser("params", help="parameter breakdown for a model")
    common(p_params)
    p_params.set_defaults(func=_cmd_params)

    p_memory = sub.add_parser("memory", help="per-rank memory under a strategy")
    common(p_memory, run=True)
    p_memory.add_argument("--activation-model", dest="activation_model",
                          choices=(CHECKPOINTED, FULL_CACHE))
    p_memory.set_defaults(func=_cmd_memory)

    p_schedule = sub.add_parser("schedule", help="task-graph dump as JSON")
    common(p_schedule, run=True)
    p_schedule.set_defaults(func=_cmd_schedule)

    p_sim = sub.add_parser("simulate", help="single-scenario step metrics")
    common(p_sim, run=True)
    p_sim.add_argument("--io-rate", dest="io_rate", type=float,
                       help="input images/second per rank")
    p_sim.add_argument("--efficiency", type=float)
    p_sim.add_argument("--latency-scale", dest="latency_scale", type=float)
    p_sim.set_defaults(func=_cmd_simulate)

    p_sweep = sub.add_parser("sweep", help="weak-scaling sweep table")
    common(p_sweep, run=True)
    p_sweep.add_argument("--strategies", help="comma-separated strategy list")
    p_sweep.add_argument("--io-rate", dest="io_rate", type=float)
    p_sweep.add_argument("--efficiency", type=float)
    p_sweep.add_argument("--latency-scale", dest="latency_scale", type=float)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_cal = sub.add_parser("calibrate", help="fit efficiency/latency to data")
    common(p_cal, model=False)
    p_cal.add_argument("--observations", help="JSON file of measured ips points")
    p_cal.add_argument("--cluster", help="cluster preset or config")
    p_cal.set_defaults(func=_cmd_calibrate)
    return parser


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        text = args.func(args)
        _emit(text, args.output)
        return 0
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, TopologyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
