"""Hierarchical machine model: nodes, GPUs, links, and process groups.

A rank is one GPU.  Ranks are numbered node-major, so rank r lives on node
r // gpus_per_node.  Inter-node bandwidth is a per-node injection limit shared
by all of the node's GPUs; link latencies are calibration parameters with
documented defaults rather than measured facts.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, TopologyError

GiB = 1024**3


@dataclass(frozen=True)
class ClusterSpec:
    num_nodes: int
    peak_flops_per_gpu: float
    gpus_per_node: int = 8
    hbm_bytes_per_gpu: int = 64 * GiB
    intra_node_bw: float = 50e9        # bytes/s per GPU-GPU link
    inter_node_bw: float = 100e9       # bytes/s injection limit per node
    intra_node_latency: float = 2e-6   # seconds
    inter_node_latency: float = 10e-6  # seconds
    compute_efficiency: float = 0.45   # calibratable fraction of peak

    def __post_init__(self) -> None:
        if self.num_nodes < 1 or self.gpus_per_node < 1:
            raise ConfigError("num_nodes and gpus_per_node must be >= 1")
        if self.hbm_bytes_per_gpu < 1:
            raise ConfigError("hbm_bytes_per_gpu must be >= 1")
        for name in ("peak_flops_per_gpu", "intra_node_bw", "inter_node_bw"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.intra_node_latency < 0 or self.inter_node_latency < 0:
            raise ConfigError("latencies must be >= 0")
        if not 0 < self.compute_efficiency <= 1:
            raise ConfigError("compute_efficiency must lie in (0, 1]")

    @property
    def world_size(self) -> int:
        return self.num_nodes * self.gpus_per_node

    @property
    def effective_flops_per_gpu(self) -> float:
        return self.peak_flops_per_gpu * self.compute_efficiency

    def node_of(self, rank: int) -> int:
        if not 0 <= rank < self.world_size:
            raise TopologyError(
                f"rank {rank} out of range for world size {self.world_size}")
        return rank // self.gpus_per_node


def frontier(num_nodes: int = 1) -> ClusterSpec:
    """Preset for one MI250X-based partition: 8 GCD ranks per node with 64 GiB
    HBM each, 50 GB/s intra-node links, a 100 GB/s NIC per node, and a
    191.5 TFLOP/s bf16 peak per rank."""
    return ClusterSpec(num_nodes=num_nodes, peak_flops_per_gpu=191.5e12)


CLUSTER_PRESETS = {"frontier": frontier}


@dataclass(frozen=True)
class LinkInfo:
    kind: str        # same-gpu | intra-node | inter-node
    bandwidth: float
    latency: float


def link_class(rank_a: int, rank_b: int, spec: ClusterSpec) -> LinkInfo:
    """Classify the link between two ranks and report its raw parameters.

    The inter-node figure is the per-node injection bandwidth; sharing between
    the node's GPUs is applied by the collective cost model, not here.
    """
    node_a, node_b = spec.node_of(rank_a), spec.node_of(rank_b)
    if rank_a == rank_b:
        return LinkInfo("same-gpu", float("inf"), 0.0)
    if node_a == node_b:
        return LinkInfo("intra-node", spec.intra_node_bw, spec.intra_node_latency)
    return LinkInfo("inter-node", spec.inter_node_bw, spec.inter_node_latency)


@dataclass(frozen=True)
class ProcessGroups:
    """A double partition of all ranks.

    Shard groups are contiguous rank ranges of size g; replica group k holds
    the k-th member of every shard group.  Every rank appears in exactly one
    group of each family.
    """

    shard_groups: tuple[tuple[int, ...], ...]
    replica_groups: tuple[tuple[int, ...], ...]

    @property
    def shard_group_size(self) -> int:
        return len(self.shard_groups[0])

    @property
    def world_size(self) -> int:
        return self.shard_group_size * len(self.shard_groups)

    def shard_group_of(self, rank: int) -> tuple[int, ...]:
        return self.shard_groups[rank // self.shard_group_size]

    def replica_group_of(self, rank: int) -> tuple[int, ...]:
        return self.replica_groups[rank % self.shard_group_size]


def build_groups(spec: ClusterSpec, shard_group_size: int) -> ProcessGroups:
    """Construct shard and replica groups for a given shard-group size.

    Shard groups never straddle a node boundary when they fit inside one
    (g <= gpus_per_node requires gpus_per_node % g == 0).
    """
    g = shard_group_size
    world = spec.world_size
    if g < 1:
        raise TopologyError(f"shard group size must be >= 1, got {g}")
    if world % g:
        raise TopologyError(
            f"shard group size {g} does not divide world size {world}")
    if g <= spec.gpus_per_node and spec.gpus_per_node % g:
        raise TopologyError(
            f"shard group size {g} does not divide gpus_per_node "
            f"{spec.gpus_per_node}, so groups would straddle nodes")
    shard_groups = tuple(tuple(range(base, base + g))
                         for base in range(0, world, g))
    replica_groups = tuple(tuple(range(k, world, g)) for k in range(g))
    return ProcessGroups(shard_groups=shard_groups, replica_groups=replica_groups)
