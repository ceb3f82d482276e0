"""Pipeline-partition balance: degrees, balanced seeds, and the adjustment loop.

The planner seeds each pipeline degree with a memory-balanced partition, then
greedily shaves the slowest stage one boundary layer at a time, accepting a
move only if (1) no stage exceeds the previous maximum stage time, (2) no
stage exceeds the device budget, and (3) no stage exceeds the peak stage
memory of the time-balanced partition.  Accepted moves walk the partition from
memory-balanced toward time-balanced without ever making either balance
degree worse than its admissible extreme.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .costs import EvalContext, StageCost, layer_memory, layer_time, stage_cost
from .specs import ModelSpec
from .strategies import DP, SDP, TP, ParallelStrategy

logger = logging.getLogger(__name__)

INF = float("inf")


@dataclass(frozen=True)
class PipelinePartition:
    stage_sizes: tuple[int, ...]

    def __post_init__(self):
        if not self.stage_sizes:
            raise ValueError("partition must have at least one stage")
        if any(s < 1 for s in self.stage_sizes):
            raise ValueError(f"every stage needs at least one layer: {self.stage_sizes}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_sizes)

    @property
    def num_layers(self) -> int:
        return sum(self.stage_sizes)

    def boundaries(self) -> list[tuple[int, int]]:
        spans = []
        start = 0
        for size in self.stage_sizes:
            spans.append((start, start + size))
            start += size
        return spans


@dataclass(frozen=True)
class BalanceReport:
    alpha_t: float
    alpha_m: float
    stage_times: tuple[float, ...]
    stage_mems: tuple[float, ...]


def balance_degrees(stage_costs: Sequence[StageCost]) -> BalanceReport:
    """alpha = 1 - max/sum, for stage times and for stage peak memories."""
    if not stage_costs:
        raise ValueError("need at least one stage")
    times = tuple(sc.time_s for sc in stage_costs)
    mems = tuple(sc.peak_mem_bytes for sc in stage_costs)
    total_t = sum(times)
    total_m = sum(mems)
    if total_t <= 0 or total_m <= 0:
        raise ValueError("stage totals must be positive to define balance degrees")
    return BalanceReport(
        alpha_t=1.0 - max(times) / total_t,
        alpha_m=1.0 - max(mems) / total_m,
        stage_times=times,
        stage_mems=mems,
    )


def partition_layers(model: ModelSpec, partition: PipelinePartition) -> list[list]:
    if partition.num_layers != model.num_layers:
        raise ValueError(
            f"partition covers {partition.num_layers} layers, model has {model.num_layers}"
        )
    return [list(model.layers[a:b]) for a, b in partition.boundaries()]


def seed_strategy(n_devices: int, pp_degree: int, use_sdp: bool = False) -> ParallelStrategy:
    """Uniform single-paradigm strategy used to cost partitions before searching."""
    group = n_devices // pp_degree
    if group == 1:
        levels: tuple = ()
    else:
        levels = ((SDP if use_sdp else DP, group),)
    return ParallelStrategy(pp_degree=pp_degree, levels=levels, ckpt=False)


def evaluate_partition(
    model: ModelSpec,
    partition: PipelinePartition,
    per_layer_strategies: Sequence[ParallelStrategy],
    micro_batch: int,
    n_micro: int,
    ctx: EvalContext,
) -> list[StageCost]:
    """Stage costs for a partition with an already-chosen per-layer strategy list."""
    if len(per_layer_strategies) != model.num_layers:
        raise ValueError("need one strategy per model layer")
    costs = []
    for stage_idx, (a, b) in enumerate(partition.boundaries(), start=1):
        costs.append(stage_cost(
            list(model.layers[a:b]),
            list(per_layer_strategies[a:b]),
            micro_batch,
            ctx,
            stage_index=stage_idx,
            n_micro=n_micro,
        ))
    return costs


def _greedy_split(weights: Sequence[float], num_stages: int) -> PipelinePartition:
    """Contiguous split with roughly equal cumulative weight per stage."""
    n = len(weights)
    total = sum(weights)
    sizes = []
    start = 0
    acc = 0.0
    for stage in range(num_stages - 1):
        remaining_stages = num_stages - stage - 1
        target = total * (stage + 1) / num_stages
        end = start
        while end < n - remaining_stages and (acc + weights[end] <= target or end < start + 1):
            acc += weights[end]
            end += 1
        sizes.append(end - start)
        start = end
    sizes.append(n - start)
    return PipelinePartition(tuple(sizes))


def _neighbor_moves(partition: PipelinePartition) -> list[PipelinePartition]:
    """All single-boundary-layer shifts that keep every stage nonempty."""
    moves = []
    sizes = list(partition.stage_sizes)
    for b in range(len(sizes) - 1):
        if sizes[b] > 1:
            left = sizes.copy()
            left[b] -= 1
            left[b + 1] += 1
            moves.append(PipelinePartition(tuple(left)))
        if sizes[b + 1] > 1:
            right = sizes.copy()
            right[b] += 1
            right[b + 1] -= 1
            moves.append(PipelinePartition(tuple(right)))
    return moves


def _hill_climb(
    partition: PipelinePartition,
    score: Callable[[PipelinePartition], float],
    max_rounds: int,
) -> PipelinePartition:
    best = partition
    best_score = score(best)
    for _ in range(max_rounds):
        round_best = None
        round_score = best_score
        for cand in _neighbor_moves(best):
            s = score(cand)
            if s > round_score + 1e-15:
                round_best, round_score = cand, s
        if round_best is None:
            break
        best, best_score = round_best, round_score
    return best


def _init_partition(
    model: ModelSpec,
    num_stages: int,
    seed_strategies: Sequence[ParallelStrategy],
    micro_batch: int,
    n_micro: int,
    ctx: EvalContext,
    objective: str,
) -> PipelinePartition:
    if num_stages > model.num_layers:
        raise ValueError(
            f"cannot split {model.num_layers} layers into {num_stages} pipeline stages"
        )
    if len(seed_strategies) != model.num_layers:
        raise ValueError("need one seed strategy per layer")

    weights = []
    for layer, strat in zip(model.layers, seed_strategies):
        if objective == "memory":
            o_f, _, o_ms = layer_memory(layer, strat, micro_batch, strat.pp_degree, n_micro,
                                        ctx.ms_multiplier)
            weights.append(o_f + o_ms)
        else:
            weights.append(layer_time(layer, strat, micro_batch, ctx.cluster, ctx.profile))
    start = _greedy_split(weights, num_stages)

    def score(p: PipelinePartition) -> float:
        report = balance_degrees(
            evaluate_partition(model, p, seed_strategies, micro_batch, n_micro, ctx)
        )
        return report.alpha_m if objective == "memory" else report.alpha_t

    return _hill_climb(start, score, max_rounds=2 * model.num_layers)


def init_partition_memory_balanced(
    model: ModelSpec,
    num_stages: int,
    seed_strategies: Sequence[ParallelStrategy],
    micro_batch: int,
    n_micro: int,
    ctx: EvalContext,
) -> PipelinePartition:
    """p_m: greedy prefix split on cumulative memory, then boundary moves while alpha_m improves."""
    return _init_partition(model, num_stages, seed_strategies, micro_batch, n_micro, ctx, "memory")


def init_partition_time_balanced(
    model: ModelSpec,
    num_stages: int,
    seed_strategies: Sequence[ParallelStrategy],
    micro_batch: int,
    n_micro: int,
    ctx: EvalContext,
) -> PipelinePartition:
    """p_t: same scheme on stage times."""
    return _init_partition(model, num_stages, seed_strategies, micro_batch, n_micro, ctx, "time")


def adjust_partition(
    partition: PipelinePartition,
    stage_costs: Sequence[StageCost],
) -> PipelinePartition:
    """Move one boundary layer off the slowest stage toward its faster neighbour.

    Ties between neighbours go to the later stage; if the slowest stage has a
    single layer or no strictly faster neighbour, the partition is a fixed
    point and is returned unchanged.
    """
    sizes = list(partition.stage_sizes)
    if len(sizes) != len(stage_costs):
        raise ValueError("one stage cost per stage required")
    times = [sc.time_s for sc in stage_costs]
    slowest = max(range(len(times)), key=lambda i: (times[i], -i))
    if sizes[slowest] <= 1:
        return partition

    candidates = []  # (neighbor time, preference rank, neighbor index)
    if slowest + 1 < len(sizes):
        candidates.append((times[slowest + 1], 0, slowest + 1))
    if slowest - 1 >= 0:
        candidates.append((times[slowest - 1], 1, slowest - 1))
    candidates.sort()
    if not candidates or candidates[0][0] >= times[slowest]:
        return partition
    target = candidates[0][2]
    sizes[slowest] -= 1
    sizes[target] += 1
    return PipelinePartition(tuple(sizes))


def validate_partition(
    new_partition: PipelinePartition,
    costs_under_new: Sequence[StageCost],
    c_max_prev: float,
    mem_budget_bytes: float,
    max_mem_under_time_balanced: float,
) -> bool:
    """Accept an adjustment only if it cannot hurt the overall pipeline.

    (1) no stage slower than the previous maximum, (2) every stage within the
    device budget, (3) no stage more memory-loaded than the worst stage of the
    time-balanced partition.
    """
    if new_partition.num_stages != len(costs_under_new):
        raise ValueError("one stage cost per stage required")
    for sc in costs_under_new:
        if sc.time_s > c_max_prev:
            return False
        if sc.peak_mem_bytes > mem_budget_bytes:
            return False
        if sc.peak_mem_bytes > max_mem_under_time_balanced:
            return False
    return True


@dataclass(frozen=True)
class SearchOutcome:
    """What one strategy search over a fixed partition returns."""

    cost: float
    strategies: tuple[ParallelStrategy, ...] | None
    stage_costs: tuple[StageCost, ...] | None
    n_micro: int


@dataclass
class BiObjectiveResult:
    cost: float = INF
    partition: PipelinePartition | None = None
    strategies: tuple[ParallelStrategy, ...] | None = None
    stage_costs: tuple[StageCost, ...] | None = None
    batch_size: int = 0
    n_micro: int = 1
    trajectory: list[dict] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.cost != INF and self.strategies is not None


SearchFn = Callable[[float, list, int, int, int], SearchOutcome]


def default_microbatch_policy(batch: int, pp_degree: int) -> int:
    """Largest divisor of the batch not exceeding 4x the pipeline depth."""
    if pp_degree <= 1:
        return 1
    m = max(1, min(4 * pp_degree, batch))
    while batch % m != 0:
        m -= 1
    return m


def bi_objective_optimize(
    model: ModelSpec,
    ctx: EvalContext,
    batch_sizes: Sequence[int],
    pp_degree: int,
    search: SearchFn,
    microbatch_policy: Callable[[int, int], int] = default_microbatch_policy,
    max_iterations: int | None = None,
) -> BiObjectiveResult:
    """Queue-driven refinement for one pipeline degree over a batch-size range.

    Each popped partition is searched, adjusted, validated, and (if valid and
    unseen) re-queued.  A hard cap of 4*L iterations per (batch, degree) cell
    guards degenerate cost models; every evaluation is recorded in the result
    trajectory for auditing.
    """
    cluster = ctx.cluster
    n_devices = cluster.n_devices
    budget = cluster.mem_budget_bytes
    num_layers = model.num_layers
    cap = max_iterations if max_iterations is not None else 4 * num_layers
    result = BiObjectiveResult()

    for batch in batch_sizes:
        if batch < 1:
            continue
        if pp_degree == 1:
            # Single stage: nothing to balance, one search settles the cell.
            part = PipelinePartition((num_layers,))
            outcome = search(budget, partition_layers(model, part), n_devices, batch, 1)
            _record_probe(result, outcome, part, batch, pp_degree)
            continue
        if pp_degree > num_layers:
            continue

        n_micro_seed = microbatch_policy(batch, pp_degree)
        micro_seed = batch // n_micro_seed

        seed_list = _seed_for(model, ctx, n_devices, pp_degree, micro_seed, n_micro_seed)
        p_time = init_partition_time_balanced(
            model, pp_degree, seed_list, micro_seed, n_micro_seed, ctx
        )
        mem_ref = max(sc.peak_mem_bytes for sc in evaluate_partition(
            model, p_time, seed_list, micro_seed, n_micro_seed, ctx
        ))
        p0 = init_partition_memory_balanced(
            model, pp_degree, seed_list, micro_seed, n_micro_seed, ctx
        )

        queue = [p0]
        visited = {p0.stage_sizes}
        iterations = 0
        while queue and iterations < cap:
            iterations += 1
            part = queue.pop(0)
            outcome = search(budget, partition_layers(model, part), n_devices, batch, pp_degree)
            record = {
                "batch_size": batch,
                "pp_degree": pp_degree,
                "partition": list(part.stage_sizes),
                "iteration": iterations,
                "cost": outcome.cost,
                "accepted": False,
                "proposed": None,
            }
            if not _finite(outcome.cost) or outcome.strategies is None:
                result.trajectory.append(record)
                continue

            report = balance_degrees(outcome.stage_costs)
            record.update(
                alpha_t=report.alpha_t,
                alpha_m=report.alpha_m,
                max_stage_time=max(report.stage_times),
                max_stage_mem=max(report.stage_mems),
            )
            if outcome.cost < result.cost:
                result.cost = outcome.cost
                result.partition = part
                result.strategies = outcome.strategies
                result.stage_costs = outcome.stage_costs
                result.batch_size = batch
                result.n_micro = outcome.n_micro

            c_max_prev = max(report.stage_times)
            adjusted = adjust_partition(part, outcome.stage_costs)
            if adjusted.stage_sizes != part.stage_sizes:
                micro = batch // outcome.n_micro
                costs_adj = evaluate_partition(
                    model, adjusted, outcome.strategies, micro, outcome.n_micro, ctx
                )
                ok = validate_partition(
                    adjusted, costs_adj, c_max_prev, budget, mem_ref
                )
                record["proposed"] = list(adjusted.stage_sizes)
                record["accepted"] = bool(ok and adjusted.stage_sizes not in visited)
                if ok and adjusted.stage_sizes not in visited:
                    visited.add(adjusted.stage_sizes)
                    queue.append(adjusted)
            result.trajectory.append(record)
            logger.debug("bi-objective step: %s", record)

    return result


def _finite(x: float) -> bool:
    return x != INF and x == x


def _record_probe(result, outcome, partition, batch, pp_degree):
    record = {
        "batch_size": batch,
        "pp_degree": pp_degree,
        "partition": list(partition.stage_sizes),
        "iteration": 1,
        "cost": outcome.cost,
        "accepted": False,
        "proposed": None,
    }
    if _finite(outcome.cost) and outcome.strategies is not None:
        report = balance_degrees(outcome.stage_costs)
        record.update(
            alpha_t=report.alpha_t,
            alpha_m=report.alpha_m,
            max_stage_time=max(report.stage_times),
            max_stage_mem=max(report.stage_mems),
        )
        if outcome.cost < result.cost:
            result.cost = outcome.cost
            result.partition = partition
            result.strategies = outcome.strategies
            result.stage_costs = outcome.stage_costs
            result.batch_size = batch
            result.n_micro = outcome.n_micro
    result.trajectory.append(record)


def _seed_for(model, ctx, n_devices, pp_degree, micro_batch, n_micro) -> list[ParallelStrategy]:
    """Per-layer seed strategies: pure DP, falling back to SDP when replication
    alone cannot fit the budget, and to TP when the batch cannot be split."""
    group = n_devices // pp_degree
    candidates = [seed_strategy(n_devices, pp_degree, use_sdp=False)]
    if group > 1:
        candidates.append(seed_strategy(n_devices, pp_degree, use_sdp=True))
        candidates.append(ParallelStrategy(pp_degree=pp_degree, levels=((TP, group),), ckpt=False))
    usable = [s for s in candidates if micro_batch % s.data_degree == 0]
    if not usable:
        usable = [candidates[-1]]
    for seed in usable:
        seed_list = [seed] * model.num_layers
        p = init_partition_memory_balanced(model, pp_degree, seed_list, micro_batch, n_micro, ctx)
        costs = evaluate_partition(model, p, seed_list, micro_batch, n_micro, ctx)
        if max(sc.peak_mem_bytes for sc in costs) <= ctx.cluster.mem_budget_bytes:
            return seed_list
    return [usable[-1]] * model.num_layers
