"""Per-layer and per-stage time/memory estimation under a hybrid strategy.

Communication volumes follow ring-collective factors: an all-reduce of V bytes
over d ranks moves 2(d-1)/d * V per device, an all-gather or reduce-scatter
(d-1)/d * V.  That reproduces the degree-2 reference points (DP gradient sync
equals the parameter bytes, sharded-DP costs 1.5x as much).  Compute and
gradient communication overlap during backward; overlapping both slows them
down, modelled as max(a, b) * slowdown.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DivisibilityError
from .specs import ClusterSpec, CostProfile, LayerSpec, ModelSpec
from .strategies import DP, SDP, TP, ParallelStrategy


@dataclass(frozen=True)
class EvalContext:
    """Everything cost evaluation needs besides the layer and the strategy."""

    model: ModelSpec
    cluster: ClusterSpec
    profile: CostProfile

    @property
    def ms_multiplier(self) -> float:
        return self.model.ms_bytes_per_param_byte


@dataclass(frozen=True)
class LayerCost:
    time_s: float
    mem_fwd_bytes: float
    mem_bwd_bytes: float
    mem_states_bytes: float
    time_no_sync_s: float


@dataclass(frozen=True)
class StageCost:
    time_s: float
    time_no_sync_s: float
    peak_mem_bytes: float


def overlap(a: float, b: float, slowdown: float) -> float:
    """Contention model: both streams active -> max(a, b) * slowdown, else serial."""
    if a > 0.0 and b > 0.0:
        return max(a, b) * slowdown
    return a + b


def level_bandwidth(strategy: ParallelStrategy, level_index: int, cluster: ClusterSpec) -> float:
    """Bandwidth of the tier a tree level runs on.

    The leaf-most level occupies consecutive devices; a level whose block
    (its degree times everything below it) fits inside one island uses the
    fast links, anything wider is bottlenecked by the inter-island links.
    """
    span = math.prod(d for _, d in strategy.levels[level_index:])
    if span <= cluster.island_size:
        return cluster.intra_island_bw
    return cluster.inter_island_bw


def _per_device_samples(strategy: ParallelStrategy, micro_batch: int) -> float:
    return micro_batch / strategy.data_degree


def _check_divisible(strategy: ParallelStrategy, micro_batch: int) -> int:
    data = strategy.data_degree
    if micro_batch % data != 0:
        raise DivisibilityError(
            f"micro-batch {micro_batch} is not divisible by the DP*SDP degree {data} "
            f"of strategy {strategy}"
        )
    return micro_batch // data


@dataclass(frozen=True)
class CommBreakdown:
    """Separate communication terms; layer_time places each into fwd or bwd."""

    grad_s: float       # DP/SDP gradient synchronisation (overlappable)
    fwd_act_s: float    # TP forward all-reduce
    bwd_act_s: float    # TP backward all-reduce
    ckpt_act_s: float   # extra TP all-reduce during recomputation

    @property
    def act_total_s(self) -> float:
        return self.fwd_act_s + self.bwd_act_s + self.ckpt_act_s


def comm_breakdown(
    layer: LayerSpec,
    strategy: ParallelStrategy,
    micro_batch: int,
    cluster: ClusterSpec,
    profile: CostProfile,
) -> CommBreakdown:
    # Per-device parameter shard: tensor parallelism splits the weights, so the
    # gradient chunk each DP/SDP collective moves shrinks accordingly.
    shard_param = layer.param_bytes / strategy.tp_degree
    samples = _per_device_samples(strategy, micro_batch)
    act_bytes = layer.bnd_bytes_per_sample * samples

    grad = 0.0
    fwd_act = 0.0
    bwd_act = 0.0
    ckpt_act = 0.0
    for idx, (paradigm, degree) in enumerate(strategy.levels):
        bw = level_bandwidth(strategy, idx, cluster) * profile.collective_efficiency
        ring = (degree - 1) / degree
        if paradigm == DP:
            grad += 2.0 * ring * shard_param / bw
        elif paradigm == SDP:
            # two all-gathers (fwd + bwd parameter collection) plus one reduce-scatter
            grad += 3.0 * ring * shard_param / bw
        elif paradigm == TP:
            per_pass = 2.0 * ring * act_bytes / bw
            fwd_act += per_pass
            bwd_act += per_pass
            if strategy.ckpt:
                ckpt_act += per_pass
    return CommBreakdown(grad_s=grad, fwd_act_s=fwd_act, bwd_act_s=bwd_act, ckpt_act_s=ckpt_act)


def comm_time(
    layer: LayerSpec,
    strategy: ParallelStrategy,
    micro_batch: int,
    cluster: ClusterSpec,
    profile: CostProfile,
) -> tuple[float, float]:
    """(gradient comm seconds, activation comm seconds) for one micro-batch."""
    parts = comm_breakdown(layer, strategy, micro_batch, cluster, profile)
    return parts.grad_s, parts.act_total_s


def compute_time(
    layer: LayerSpec,
    strategy: ParallelStrategy,
    micro_batch: int,
    profile: CostProfile,
) -> float:
    """Forward + backward (+ checkpoint recompute) compute seconds for one micro-batch."""
    samples = _check_divisible(strategy, micro_batch)
    fwd = samples * profile.fwd_time(layer) / strategy.tp_degree
    factor = 1.0 + profile.bwd_fwd_ratio + (1.0 if strategy.ckpt else 0.0)
    return fwd * factor


def layer_time(
    layer: LayerSpec,
    strategy: ParallelStrategy,
    micro_batch: int,
    cluster: ClusterSpec,
    profile: CostProfile,
) -> float:
    """c(l, s): simulated execution time of one layer for one micro-batch."""
    return _layer_times(layer, strategy, micro_batch, cluster, profile)[0]


def _layer_times(
    layer: LayerSpec,
    strategy: ParallelStrategy,
    micro_batch: int,
    cluster: ClusterSpec,
    profile: CostProfile,
) -> tuple[float, float]:
    """(time with gradient sync, time without) — the latter drives steady-state micro-batches."""
    samples = _check_divisible(strategy, micro_batch)
    fwd_compute = samples * profile.fwd_time(layer) / strategy.tp_degree
    bwd_compute = fwd_compute * profile.bwd_fwd_ratio
    parts = comm_breakdown(layer, strategy, micro_batch, cluster, profile)

    forward = fwd_compute + parts.fwd_act_s
    backward_tail = parts.bwd_act_s
    if strategy.ckpt:
        backward_tail += fwd_compute + parts.ckpt_act_s  # recompute pass

    with_sync = forward + overlap(bwd_compute, parts.grad_s, cluster.overlap_slowdown) + backward_tail
    no_sync = forward + bwd_compute + backward_tail
    return with_sync, no_sync


def layer_memory(
    layer: LayerSpec,
    strategy: ParallelStrategy,
    micro_batch: int,
    stage_index: int,
    n_micro: int,
    ms_multiplier: float,
) -> tuple[float, float, float]:
    """(O_f, O_b, O_ms) per device, in bytes.

    O_f carries the 1F1B stashing multiplier min(P - stage + 1, m): shallower
    stages keep more in-flight micro-batches alive.  With checkpointing the
    intermediate activations move from O_f to O_b (they only exist while the
    layer's own backward runs, hence no stashing multiplier on O_b).
    """
    pp_degree = strategy.pp_degree
    if not 1 <= stage_index <= pp_degree:
        raise ValueError(f"stage_index {stage_index} out of range 1..{pp_degree}")
    if n_micro < 1:
        raise ValueError(f"n_micro must be >= 1, got {n_micro}")
    samples = _check_divisible(strategy, micro_batch)

    tp = strategy.tp_degree
    o_ms = layer.param_bytes * ms_multiplier / (tp * strategy.sdp_degree)

    frac = layer.tp_act_replication_fraction
    int_per_sample = layer.int_bytes_per_sample * (frac + (1.0 - frac) / tp)
    bnd_per_mb = layer.bnd_bytes_per_sample * samples
    int_per_mb = int_per_sample * samples

    stash = min(pp_degree - stage_index + 1, n_micro)
    if strategy.ckpt:
        o_f = stash * bnd_per_mb
        o_b = int_per_mb
    else:
        o_f = stash * (bnd_per_mb + int_per_mb)
        o_b = 0.0
    return o_f, o_b, o_ms


def layer_cost(
    layer: LayerSpec,
    strategy: ParallelStrategy,
    micro_batch: int,
    ctx: EvalContext,
    stage_index: int = 1,
    n_micro: int = 1,
) -> LayerCost:
    time_s, no_sync = _layer_times(layer, strategy, micro_batch, ctx.cluster, ctx.profile)
    o_f, o_b, o_ms = layer_memory(
        layer, strategy, micro_batch, stage_index, n_micro, ctx.ms_multiplier
    )
    return LayerCost(
        time_s=time_s,
        mem_fwd_bytes=o_f,
        mem_bwd_bytes=o_b,
        mem_states_bytes=o_ms,
        time_no_sync_s=no_sync,
    )


def transform_cost(
    layer: LayerSpec,
    prev_strategy: ParallelStrategy | None,
    cur_strategy: ParallelStrategy,
    micro_batch: int,
    cluster: ClusterSpec,
) -> float:
    """R(l, S_i, S_j): relayout time for the layer's input activations.

    The activation tensor is block-split along samples by the DP*SDP product
    and along the hidden dimension by the TP degree.  Each device fetches
    whatever part of its target shard it does not already hold; nested
    power-of-two splits make the local overlap the finer of the two grids,
    so refining a split is a free local slice.
    """
    if prev_strategy is None:
        return 0.0
    d_src, t_src = prev_strategy.data_degree, prev_strategy.tp_degree
    d_dst, t_dst = cur_strategy.data_degree, cur_strategy.tp_degree
    if d_src == d_dst and t_src == t_dst:
        return 0.0
    total = layer.bnd_bytes_per_sample * micro_batch
    required = total / (d_dst * t_dst)
    local = total / (max(d_src, d_dst) * max(t_src, t_dst))
    moved = max(required - local, 0.0)
    return moved / cluster.intra_island_bw


def stage_p2p_time(first_layer: LayerSpec, micro_batch: int, pp_degree: int, cluster: ClusterSpec) -> float:
    """Boundary-activation receive time charged to a non-first pipeline stage."""
    if pp_degree <= 1:
        return 0.0
    group_size = cluster.n_devices // pp_degree
    bw = cluster.inter_island_bw if group_size >= cluster.island_size else cluster.intra_island_bw
    return first_layer.bnd_bytes_per_sample * micro_batch / bw


def memory_footprint(
    layers: list[LayerSpec],
    strategies: list[ParallelStrategy],
    micro_batch: int,
    stage_index: int,
    n_micro: int,
    ms_multiplier: float,
) -> tuple[float, float]:
    """(E_all, E_f) for a layer run under per-layer strategies.

    E_f sums forward activations and model states; E_all is the backward peak,
    the maximum over layers i of (forward stash up to i) + (backward
    activations of i) + (all model states).  E_f <= E_all always holds.
    """
    if len(layers) != len(strategies):
        raise ValueError("layers and strategies must have equal length")
    if not layers:
        return 0.0, 0.0
    total_ms = 0.0
    prefix_f = 0.0
    peak_component = 0.0
    for layer, strategy in zip(layers, strategies):
        o_f, o_b, o_ms = layer_memory(
            layer, strategy, micro_batch, stage_index, n_micro, ms_multiplier
        )
        total_ms += o_ms
        prefix_f += o_f
        peak_component = max(peak_component, prefix_f + o_b)
    e_f = prefix_f + total_ms
    e_all = peak_component + total_ms
    return e_all, e_f


def stage_cost(
    layers: list[LayerSpec],
    strategies: list[ParallelStrategy],
    micro_batch: int,
    ctx: EvalContext,
    stage_index: int = 1,
    n_micro: int = 1,
) -> StageCost:
    """C(M_i, B_m): layer times + transformation costs + boundary receive."""
    if len(layers) != len(strategies):
        raise ValueError("layers and strategies must have equal length")
    if not layers:
        raise ValueError("stage must contain at least one layer")
    pp_degree = strategies[0].pp_degree
    time_s = 0.0
    no_sync = 0.0
    prev: ParallelStrategy | None = None
    for layer, strategy in zip(layers, strategies):
        t, t_ns = _layer_times(layer, strategy, micro_batch, ctx.cluster, ctx.profile)
        r = transform_cost(layer, prev, strategy, micro_batch, ctx.cluster)
        time_s += t + r
        no_sync += t_ns + r
        prev = strategy
    if stage_index > 1:
        p2p = stage_p2p_time(layers[0], micro_batch, pp_degree, ctx.cluster)
        time_s += p2p
        no_sync += p2p
    e_all, _ = memory_footprint(
        layers, strategies, micro_batch, stage_index, n_micro, ctx.ms_multiplier
    )
    return StageCost(time_s=time_s, time_no_sync_s=no_sync, peak_mem_bytes=e_all)


def pipeline_cost(stage_costs: list[StageCost], n_micro: int) -> float:
    """C(M, B) = (m - 1) * max_i C_no_sync(M_i) + sum_i C(M_i)."""
    if not stage_costs:
        raise ValueError("pipeline must contain at least one stage")
    if n_micro < 1:
        raise ValueError(f"n_micro must be >= 1, got {n_micro}")
    steady = max(sc.time_no_sync_s for sc in stage_costs)
    return (n_micro - 1) * steady + sum(sc.time_s for sc in stage_costs)


def pipeline_peak_memory(stage_costs: list[StageCost]) -> float:
    if not stage_costs:
        return 0.0
    return max(sc.peak_mem_bytes for sc in stage_costs)
