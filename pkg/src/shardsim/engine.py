"""Deterministic discrete-event simulation of a step schedule on a cluster.

One representative rank is simulated: all ranks run the same task sequence and
collectives are symmetric, so the canonical timeline is the step time.
Resources are the rank's compute stream plus one communication stream per
(link class, group); a task starts once its dependencies are done and its
resource is idle, lowest task id first.  There is no randomness anywhere, so
identical inputs produce identical traces.

The input stage is modeled as a pipelined source: in steady state the step
time is max(simulated makespan, local_batch / io_rate); it never adds.
"""

from __future__ import annotations

import heapq
import json
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np

from .arch import CHECKPOINTED, MAEConfig, ViTConfig, activation_bytes, get_model
from .cluster import ClusterSpec
from .collectives import ALL_GATHER, ALL_REDUCE, REDUCE_SCATTER, \
    CollectiveCall, group_channel, group_nodes
from .errors import ConfigError, TopologyError
from .sharding import COMPUTE, FREE, MemoryBreakdown, PrefetchPolicy, \
    StepSchedule, Strategy, build_units, make_plan, memory_footprint, \
    step_schedule

_COLLECTIVE_KINDS = (ALL_GATHER, REDUCE_SCATTER, ALL_REDUCE)


@dataclass(frozen=True)
class IoModel:
    """Pipelined input stage feeding each rank at a fixed image rate."""

    images_per_second_per_rank: float
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.enabled and self.images_per_second_per_rank <= 0:
            raise ConfigError("io rate must be > 0 when enabled")


@dataclass(frozen=True)
class Event:
    task_id: int
    start: float
    end: float
    resource: str


@dataclass(frozen=True)
class EventTrace:
    events: tuple[Event, ...]

    @property
    def makespan(self) -> float:
        return max((e.end for e in self.events), default=0.0)

    def events_for(self, task_ids) -> list[Event]:
        wanted = set(task_ids)
        return [e for e in self.events if e.task_id in wanted]

    def to_json_rows(self) -> list[dict]:
        return [{"task": e.task_id, "start": e.start, "end": e.end,
                 "resource": e.resource} for e in self.events]


@dataclass(frozen=True)
class StepMetrics:
    step_seconds: float
    images_per_second: float
    comm_seconds_exposed: float
    comm_fraction: float
    compute_seconds: float
    io_seconds: float
    peak_memory: MemoryBreakdown | None = None

    @property
    def feasible(self) -> bool:
        return self.peak_memory.feasible if self.peak_memory else True


class _CompiledSchedule:
    """Static timing terms of a schedule on a cluster, reusable while only
    compute efficiency and latency scale vary between simulations."""

    __slots__ = ("n", "flops", "wire", "latency", "resources", "names",
                 "children", "base_deps")

    def __init__(self, schedule: StepSchedule, cluster: ClusterSpec) -> None:
        tasks = schedule.tasks
        self.n = len(tasks)
        self.flops = [0.0] * self.n
        self.wire = [0.0] * self.n       # bandwidth term, seconds
        self.latency = [0.0] * self.n    # latency term at scale 1, seconds
        self.resources = [0] * self.n
        self.names = ["compute"] * self.n
        self.children: list[list[int]] = [[] for _ in range(self.n)]
        self.base_deps = [len(t.deps) for t in tasks]
        resource_ids: dict[str, int] = {"compute": 0}
        for t in tasks:
            for d in t.deps:
                self.children[d].append(t.id)
            if t.kind == COMPUTE:
                self.flops[t.id] = t.flops
                continue
            if t.kind == FREE:
                continue
            # Validate once; the per-candidate loop never re-touches groups.
            CollectiveCall(t.kind, t.bytes, t.group)
            spans = len(group_nodes(t.group, cluster)) > 1
            link = "inter" if spans else "intra"
            stride = t.group[1] - t.group[0] if len(t.group) > 1 else 0
            key = f"comm:{link}:{t.group[0]}+{stride}x{len(t.group)}"
            self.resources[t.id] = resource_ids.setdefault(key, len(resource_ids))
            self.names[t.id] = key
            n_ranks = len(t.group)
            if n_ranks == 1 or t.bytes == 0:
                continue
            bandwidth, alpha = group_channel(t.group, cluster)
            doubled = 2 if t.kind == ALL_REDUCE else 1
            self.wire[t.id] = doubled * (n_ranks - 1) / n_ranks * t.bytes / bandwidth
            self.latency[t.id] = doubled * (n_ranks - 1) * alpha

    def durations(self, effective_flops: float, latency_scale: float,
                  zero_comm: bool) -> list[float]:
        if zero_comm:
            return [f / effective_flops if f else 0.0 for f in self.flops]
        return [
            f / effective_flops if f else w + lat * latency_scale
            for f, w, lat in zip(self.flops, self.wire, self.latency)
        ]

    def run(self, durations: list[float]) -> tuple[list[float], list[float]]:
        """Event-driven list scheduling: at every completion, each idle
        resource starts its lowest-id ready task.  Fully deterministic."""
        n = self.n
        remaining = self.base_deps[:]
        ready: dict[int, list[int]] = {}
        busy: dict[int, bool] = {}
        start = [0.0] * n
        end = [0.0] * n
        running: list[tuple[float, int]] = []
        scheduled = 0

        def try_start(resource: int, now: float) -> None:
            nonlocal scheduled
            heap = ready.get(resource)
            if not heap or busy.get(resource):
                return
            tid = heapq.heappop(heap)
            start[tid] = now
            end[tid] = now + durations[tid]
            busy[resource] = True
            heapq.heappush(running, (end[tid], tid))
            scheduled += 1

        for tid in range(n):
            if remaining[tid] == 0:
                heapq.heappush(ready.setdefault(self.resources[tid], []), tid)
        for resource in list(ready):
            try_start(resource, 0.0)

        while running:
            now, tid = heapq.heappop(running)
            resource = self.resources[tid]
            busy[resource] = False
            for child in self.children[tid]:
                remaining[child] -= 1
                if remaining[child] == 0:
                    child_resource = self.resources[child]
                    heapq.heappush(ready.setdefault(child_resource, []), child)
                    try_start(child_resource, now)
            try_start(resource, now)

        if scheduled != n:
            raise ValueError(
                "schedule contains unreachable tasks (dependency cycle)")
        return start, end


def simulate_schedule(schedule: StepSchedule, cluster: ClusterSpec,
                      latency_scale: float = 1.0,
                      zero_comm: bool = False) -> EventTrace:
    """Simulate the DAG on its resources and return the full event trace."""
    compiled = _CompiledSchedule(schedule, cluster)
    durations = compiled.durations(cluster.effective_flops_per_gpu,
                                   latency_scale, zero_comm)
    start, end = compiled.run(durations)
    names = compiled.names
    events = tuple(Event(t.id, start[t.id], end[t.id], names[t.id])
                   for t in schedule.tasks)
    return EventTrace(events=events)


def simulate_step(schedule: StepSchedule, cluster: ClusterSpec,
                  io: IoModel | None = None, latency_scale: float = 1.0,
                  memory: MemoryBreakdown | None = None
                  ) -> tuple[EventTrace, StepMetrics]:
    """Simulate one step and derive throughput metrics.

    Exposed communication is the makespan difference between the run as-is and
    a rerun with every collective forced to zero duration.
    """
    compiled = _CompiledSchedule(schedule, cluster)
    flops_rate = cluster.effective_flops_per_gpu
    start, end = compiled.run(compiled.durations(flops_rate, latency_scale, False))
    synthetic = max(end, default=0.0)
    names = compiled.names
    trace = EventTrace(events=tuple(
        Event(t.id, start[t.id], end[t.id], names[t.id]) for t in schedule.tasks))
    _, end_nc = compiled.run(compiled.durations(flops_rate, latency_scale, True))
    no_comm = max(end_nc, default=0.0)
    exposed = max(0.0, synthetic - no_comm)
    fraction = exposed / synthetic if synthetic > 0 else 0.0

    io_seconds = 0.0
    step = synthetic
    if io is not None and io.enabled:
        io_seconds = schedule.local_batch / io.images_per_second_per_rank
        step = max(synthetic, io_seconds)
    global_batch = schedule.world * schedule.local_batch
    ips = global_batch / step if step > 0 else 0.0
    compute_seconds = sum(
        t.flops / cluster.effective_flops_per_gpu
        for t in schedule.tasks if t.kind == COMPUTE)
    metrics = StepMetrics(
        step_seconds=step,
        images_per_second=ips,
        comm_seconds_exposed=exposed,
        comm_fraction=fraction,
        compute_seconds=compute_seconds,
        io_seconds=io_seconds,
        peak_memory=memory,
    )
    return trace, metrics


def comm_fraction(schedule: StepSchedule, cluster: ClusterSpec,
                  latency_scale: float = 1.0) -> float:
    """Fraction of the step lost to communication: (t_with - t_without)/t_with."""
    with_comm = simulate_schedule(schedule, cluster, latency_scale).makespan
    without = simulate_schedule(schedule, cluster, latency_scale,
                                zero_comm=True).makespan
    if with_comm <= 0:
        return 0.0
    return max(0.0, with_comm - without) / with_comm


@dataclass(frozen=True)
class Scenario:
    """One simulated configuration: model preset, strategy, and node count."""

    model: str
    strategy: Strategy
    nodes: int
    local_batch: int = 32
    policy: PrefetchPolicy = PrefetchPolicy()


def _resolve_model(model) -> ViTConfig | MAEConfig:
    if isinstance(model, (ViTConfig, MAEConfig)):
        return model
    return get_model(model)


def prepare_scenario(scenario: Scenario, cluster: ClusterSpec,
                     activation_model: str = CHECKPOINTED
                     ) -> tuple[StepSchedule, MemoryBreakdown, ClusterSpec]:
    """Build the schedule and memory breakdown for a scenario (no simulation)."""
    spec = replace(cluster, num_nodes=scenario.nodes)
    model = _resolve_model(scenario.model)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        units = build_units(model, scenario.local_batch)
        plan = make_plan(units, scenario.strategy, spec)
        acts = activation_bytes(model, scenario.local_batch,
                                precision=plan.precision, model=activation_model)
    mem = memory_footprint(plan, acts)
    sched = step_schedule(plan, scenario.policy, local_batch=scenario.local_batch)
    return sched, mem, spec


def run_scenario(scenario: Scenario, cluster: ClusterSpec,
                 io: IoModel | None = None,
                 compute_efficiency: float | None = None,
                 latency_scale: float = 1.0,
                 activation_model: str = CHECKPOINTED) -> StepMetrics:
    """Simulate one scenario end to end and return its metrics."""
    sched, mem, spec = prepare_scenario(scenario, cluster, activation_model)
    if compute_efficiency is not None:
        spec = replace(spec, compute_efficiency=compute_efficiency)
    _, metrics = simulate_step(sched, spec, io=io, latency_scale=latency_scale,
                               memory=mem)
    return metrics


@dataclass(frozen=True)
class SweepRow:
    model: str
    strategy: str
    nodes: int
    ips: float | None
    ideal_ips: float | None
    comm_fraction: float | None
    peak_gb: float | None
    feasible: bool


_CSV_HEADER = "model,strategy,nodes,ips,ideal_ips,comm_fraction,peak_gb,feasible"


def _fmt(value: float | None, decimals: int) -> str:
    return "" if value is None else f"{value:.{decimals}f}"


@dataclass(frozen=True)
class SweepTable:
    rows: tuple[SweepRow, ...]

    def to_csv(self) -> str:
        lines = [_CSV_HEADER]
        for r in self.rows:
            lines.append(",".join([
                r.model, r.strategy, str(r.nodes),
                _fmt(r.ips, 1), _fmt(r.ideal_ips, 1),
                _fmt(r.comm_fraction, 4), _fmt(r.peak_gb, 2),
                "yes" if r.feasible else "no",
            ]))
        return "\n".join(lines) + "\n"

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps([asdict(r) for r in self.rows], indent=indent)

    @staticmethod
    def from_csv(text: str) -> "SweepTable":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if not lines or lines[0] != _CSV_HEADER:
            raise ValueError("unrecognized sweep CSV header")
        rows = []
        for line in lines[1:]:
            cols = line.split(",")
            rows.append(SweepRow(
                model=cols[0], strategy=cols[1], nodes=int(cols[2]),
                ips=float(cols[3]) if cols[3] else None,
                ideal_ips=float(cols[4]) if cols[4] else None,
                comm_fraction=float(cols[5]) if cols[5] else None,
                peak_gb=float(cols[6]) if cols[6] else None,
                feasible=cols[7] == "yes",
            ))
        return SweepTable(rows=tuple(rows))


def sweep(models, strategies, node_counts, cluster: ClusterSpec,
          policy: PrefetchPolicy | None = None, local_batch: int = 32,
          io: IoModel | None = None, compute_efficiency: float | None = None,
          latency_scale: float = 1.0) -> SweepTable:
    """Weak-scaling sweep: one row per (model, strategy, node count).

    Strategies that cannot be built at a node count produce a row marked
    infeasible instead of being dropped.  The ideal column scales the smallest
    feasible node count's throughput linearly.  Metric values are quantized to
    their printed precision so the CSV, JSON, and in-memory forms agree.
    """
    if not models or not strategies or not node_counts:
        raise ConfigError("models, strategies, and node_counts must be non-empty")
    policy = policy or PrefetchPolicy()
    rows: list[SweepRow] = []
    for model in models:
        for strategy in strategies:
            measured: list[tuple[int, StepMetrics | None]] = []
            for nodes in node_counts:
                scenario = Scenario(model=model, strategy=strategy, nodes=nodes,
                                    local_batch=local_batch, policy=policy)
                try:
                    metrics = run_scenario(
                        scenario, cluster, io=io,
                        compute_efficiency=compute_efficiency,
                        latency_scale=latency_scale)
                except TopologyError:
                    metrics = None
                measured.append((nodes, metrics))
            base = next(((n, m) for n, m in measured if m is not None), None)
            for nodes, metrics in measured:
                if metrics is None:
                    rows.append(SweepRow(model, strategy.label, nodes,
                                         None, None, None, None, False))
                    continue
                ips = round(metrics.images_per_second, 1)
                ideal = None
                if base is not None:
                    base_nodes, base_metrics = base
                    ideal = round(base_metrics.images_per_second
                                  * nodes / base_nodes, 1)
                peak_gb = round(metrics.peak_memory.total_bytes / 1024**3, 2) \
                    if metrics.peak_memory else None
                rows.append(SweepRow(
                    model=model, strategy=strategy.label, nodes=nodes,
                    ips=ips, ideal_ips=ideal,
                    comm_fraction=round(metrics.comm_fraction, 4),
                    peak_gb=peak_gb, feasible=metrics.feasible))
    return SweepTable(rows=tuple(rows))


@dataclass(frozen=True)
class CalibratedParams:
    compute_efficiency: float
    effective_latency_scale: float
    residual: float


def calibrate(observations, cluster: ClusterSpec,
              efficiency_grid=None, latency_scale_grid=None,
              refinement_rounds: int = 3) -> CalibratedParams:
    """Fit (compute_efficiency, latency scale) to measured throughput points.

    Grid search plus local refinement, minimizing the sum of squared relative
    throughput errors.  Schedules are built once per scenario and re-timed for
    every candidate, so the search stays cheap.  The residual of the best fit
    is part of the result, never hidden.
    """
    observations = list(observations)
    if len(observations) < 2:
        warnings.warn("calibration with fewer than 2 observations is ill-posed",
                      UserWarning, stacklevel=2)
    elif len({scenario for scenario, _ in observations}) < 2:
        warnings.warn("calibration observations all describe the same scenario; "
                      "the fit is ill-posed", UserWarning, stacklevel=2)

    prepared = []
    for scenario, measured in observations:
        if measured <= 0:
            raise ConfigError("measured ips must be > 0")
        sched, _, spec = prepare_scenario(scenario, cluster)
        compiled = _CompiledSchedule(sched, spec)
        global_batch = sched.world * sched.local_batch
        prepared.append((compiled, spec.peak_flops_per_gpu, global_batch,
                         float(measured)))

    def loss(efficiency: float, scale: float) -> float:
        total = 0.0
        for compiled, peak, global_batch, measured in prepared:
            durations = compiled.durations(peak * efficiency, scale, False)
            _, end = compiled.run(durations)
            ips = global_batch / max(end)
            total += ((ips - measured) / measured) ** 2
        return total

    eff_grid = np.asarray(efficiency_grid if efficiency_grid is not None
                          else np.linspace(0.05, 1.0, 20))
    scale_grid = np.asarray(latency_scale_grid if latency_scale_grid is not None
                            else np.geomspace(0.25, 32.0, 15))

    best = (float("inf"), float(eff_grid[0]), float(scale_grid[0]))
    for e in eff_grid:
        for s in scale_grid:
            value = loss(float(e), float(s))
            if value < best[0]:
                best = (value, float(e), float(s))

    e_step = float(eff_grid[-1] - eff_grid[0]) / max(len(eff_grid) - 1, 1)
    s_width = float(scale_grid[-1] / scale_grid[0]) ** (1 / max(len(scale_grid) - 1, 1))
    for _ in range(refinement_rounds):
        _, e0, s0 = best
        eff_grid = np.clip(np.linspace(e0 - e_step, e0 + e_step, 9), 1e-3, 1.0)
        scale_grid = np.geomspace(s0 / s_width, s0 * s_width, 9)
        for e in eff_grid:
            for s in scale_grid:
                value = loss(float(e), float(s))
                if value < best[0]:
                    best = (value, float(e), float(s))
        e_step /= 4.0
        s_width **= 0.25

    residual, efficiency, scale = best
    return CalibratedParams(compute_efficiency=efficiency,
                            effective_latency_scale=scale,
                            residual=residual)
