"""End-to-end planning: batch-size sweep, per-degree search, plan assembly.

The base sweep raises the batch size step by step, costing every power-of-two
pipeline degree on a memory-balanced seed partition, and stops once no degree
fits the device budget.  The bi-objective refinement then re-optimises pipeline
partitions around the best batch size found.  A tiny exhaustive oracle over
the same cost estimator backs the tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Any

from .balance import (
    BalanceReport,
    PipelinePartition,
    SearchOutcome,
    balance_degrees,
    bi_objective_optimize,
    init_partition_memory_balanced,
    partition_layers,
    _seed_for,
)
from .costs import (
    EvalContext,
    StageCost,
    layer_memory,
    pipeline_cost,
    stage_cost,
    stage_p2p_time,
    transform_cost,
    _layer_times,
)
from .dpsearch import dp_search
from .errors import InfeasiblePlanError
from .specs import ClusterSpec, CostProfile, ModelSpec
from .strategies import (
    ParallelStrategy,
    candidate_pp_degrees,
    enumerate_strategies,
    parse_strategy,
    prune_dp_sdp,
)

INF = float("inf")

DEFAULT_GRANULARITY_BYTES = 64 * 2**20


@dataclass(frozen=True)
class PlannerOptions:
    batch_step: int = 8
    max_batch: int = 4096
    granularity_bytes: int = DEFAULT_GRANULARITY_BYTES
    microbatch_cap_factor: int = 4
    min_micro_size: int = 1
    bi_objective: bool = False
    batch_radius: int = 16
    fuse_identical: bool = False
    approx_prev: bool = False


@dataclass(frozen=True)
class Plan:
    pp_degree: int
    partition: tuple[int, ...]
    n_micro: int
    batch_size: int
    strategies: tuple[ParallelStrategy, ...]
    predicted_time_s: float
    predicted_throughput: float
    balance: BalanceReport
    peak_mem_per_stage: tuple[float, ...]

    def stage_layer_ids(self) -> list[list[int]]:
        ids = []
        start = 0
        for size in self.partition:
            ids.append(list(range(start, start + size)))
            start += size
        return ids

    def to_document(self, cluster: ClusterSpec | None = None) -> dict[str, Any]:
        stages = []
        start = 0
        for size in self.partition:
            stages.append({
                "layers": [
                    {"id": lid, "strategy": self.strategies[lid].to_string(cluster)}
                    for lid in range(start, start + size)
                ],
            })
            start += size
        return {
            "pp_degree": self.pp_degree,
            "partition": list(self.partition),
            "n_micro": self.n_micro,
            "batch_size": self.batch_size,
            "stages": stages,
            "predicted_time_s": self.predicted_time_s,
            "predicted_throughput": self.predicted_throughput,
            "alpha_t": self.balance.alpha_t,
            "alpha_m": self.balance.alpha_m,
            "peak_mem_per_stage": list(self.peak_mem_per_stage),
        }


def init_microbatch_num(
    batch: int,
    pp_degree: int,
    cap_factor: int = 4,
    min_micro_size: int = 1,
) -> int:
    """Largest divisor of the batch within the cap that keeps micro-batches big enough."""
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    if pp_degree <= 1:
        return 1
    cap = min(cap_factor * pp_degree, batch)
    for m in range(cap, 0, -1):
        if batch % m == 0 and batch // m >= min_micro_size:
            return m
    return 1


def galvatron_search(
    budget_bytes: float,
    stages: list[list],
    n_devices: int,
    batch: int,
    pp_degree: int,
    ctx: EvalContext,
    opts: PlannerOptions = PlannerOptions(),
) -> SearchOutcome:
    """Per-stage dynamic programming under one (batch, pipeline degree) cell."""
    n_micro = init_microbatch_num(
        batch, pp_degree, opts.microbatch_cap_factor, opts.min_micro_size
    )
    micro_batch = batch // n_micro
    sset = prune_dp_sdp(enumerate_strategies(n_devices, pp_degree))

    all_strategies: list[ParallelStrategy] = []
    stage_costs: list[StageCost] = []
    for stage_idx, stage_layers in enumerate(stages, start=1):
        result = dp_search(
            stage_layers,
            budget_bytes,
            sset,
            micro_batch,
            opts.granularity_bytes,
            ctx,
            stage_index=stage_idx,
            n_micro=n_micro,
            fuse_identical=opts.fuse_identical,
            approx_prev=opts.approx_prev,
        )
        if not result.feasible:
            return SearchOutcome(cost=INF, strategies=None, stage_costs=None, n_micro=n_micro)
        all_strategies.extend(result.strategies)
        stage_costs.append(stage_cost(
            stage_layers, list(result.strategies), micro_batch, ctx,
            stage_index=stage_idx, n_micro=n_micro,
        ))
    cost = pipeline_cost(stage_costs, n_micro)
    return SearchOutcome(
        cost=cost,
        strategies=tuple(all_strategies),
        stage_costs=tuple(stage_costs),
        n_micro=n_micro,
    )


def _assemble_plan(
    model: ModelSpec,
    batch: int,
    pp_degree: int,
    partition: PipelinePartition,
    outcome: SearchOutcome,
) -> Plan:
    report = balance_degrees(outcome.stage_costs)
    return Plan(
        pp_degree=pp_degree,
        partition=partition.stage_sizes,
        n_micro=outcome.n_micro,
        batch_size=batch,
        strategies=outcome.strategies,
        predicted_time_s=outcome.cost,
        predicted_throughput=batch / outcome.cost,
        balance=report,
        peak_mem_per_stage=tuple(sc.peak_mem_bytes for sc in outcome.stage_costs),
    )


def _infeasibility_diagnostics(
    model: ModelSpec, ctx: EvalContext, batch: int, opts: PlannerOptions
) -> dict:
    """Identify which constraint bound first when even the smallest batch fails."""
    cluster = ctx.cluster
    diag: dict[str, Any] = {"batch_size": batch, "mem_budget_bytes": cluster.mem_budget_bytes}
    per_p = {}
    for p in candidate_pp_degrees(cluster.n_devices):
        if p > model.num_layers:
            per_p[p] = "more stages than layers"
            continue
        n_micro = init_microbatch_num(batch, p, opts.microbatch_cap_factor, opts.min_micro_size)
        micro = batch // n_micro
        sset = prune_dp_sdp(enumerate_strategies(cluster.n_devices, p))
        usable = [s for s in sset if micro % s.data_degree == 0]
        if not usable:
            per_p[p] = f"micro-batch {micro} indivisible by every strategy"
            continue
        min_states = INF
        min_total = INF
        for layer in model.layers:
            for s in usable:
                o_f, _, o_ms = layer_memory(layer, s, micro, p, n_micro, ctx.ms_multiplier)
                min_states = min(min_states, o_ms)
                min_total = min(min_total, o_f + o_ms)
        if min_states > cluster.mem_budget_bytes:
            per_p[p] = "model states alone exceed the budget under every strategy"
        elif min_total > cluster.mem_budget_bytes:
            per_p[p] = "single-layer footprint exceeds the budget under every strategy"
        else:
            per_p[p] = "no per-layer assignment satisfies the backward-peak budget"
    diag["per_pp_degree"] = per_p
    return diag


def galvatron_base(
    model: ModelSpec,
    cluster: ClusterSpec,
    profile: CostProfile,
    opts: PlannerOptions = PlannerOptions(),
) -> Plan:
    """Batch-size sweep: raise the batch until every pipeline degree runs out of memory."""
    ctx = EvalContext(model=model, cluster=cluster, profile=profile)
    best: Plan | None = None
    batch = opts.batch_step
    while batch <= opts.max_batch:
        cell_best: tuple[float, int, PipelinePartition, SearchOutcome] | None = None
        for pp_degree in candidate_pp_degrees(cluster.n_devices):
            if pp_degree > model.num_layers:
                continue
            n_micro = init_microbatch_num(
                batch, pp_degree, opts.microbatch_cap_factor, opts.min_micro_size
            )
            micro = batch // n_micro
            seed_list = _seed_for(model, ctx, cluster.n_devices, pp_degree, micro, n_micro)
            partition = init_partition_memory_balanced(
                model, pp_degree, seed_list, micro, n_micro, ctx
            )
            outcome = galvatron_search(
                cluster.mem_budget_bytes,
                partition_layers(model, partition),
                cluster.n_devices,
                batch,
                pp_degree,
                ctx,
                opts,
            )
            if outcome.cost < INF and (cell_best is None or outcome.cost < cell_best[0]):
                cell_best = (outcome.cost, pp_degree, partition, outcome)
        if cell_best is None:
            if best is None:
                raise InfeasiblePlanError(
                    f"no feasible plan at the smallest batch size {batch}",
                    diagnostics=_infeasibility_diagnostics(model, ctx, batch, opts),
                )
            return best
        cost, pp_degree, partition, outcome = cell_best
        plan = _assemble_plan(model, batch, pp_degree, partition, outcome)
        if best is None or plan.predicted_throughput > best.predicted_throughput:
            best = plan
        batch += opts.batch_step
    return best


def plan_full(
    model: ModelSpec,
    cluster: ClusterSpec,
    profile: CostProfile,
    opts: PlannerOptions = PlannerOptions(),
) -> Plan:
    """Base sweep plus (optionally) bi-objective partition refinement around its optimum."""
    base = galvatron_base(model, cluster, profile, opts)
    if not opts.bi_objective:
        return base
    ctx = EvalContext(model=model, cluster=cluster, profile=profile)

    def search(budget, stages, n_devices, batch, pp_degree):
        return galvatron_search(budget, stages, n_devices, batch, pp_degree, ctx, opts)

    def microbatch_policy(batch, pp_degree):
        return init_microbatch_num(
            batch, pp_degree, opts.microbatch_cap_factor, opts.min_micro_size
        )

    b0 = base.batch_size
    lo = max(opts.batch_step, b0 - opts.batch_radius)
    batch_sizes = list(range(lo, b0 + opts.batch_radius + 1, opts.batch_step))

    best = base
    for pp_degree in candidate_pp_degrees(cluster.n_devices):
        if pp_degree < 2 or pp_degree > model.num_layers:
            continue
        result = bi_objective_optimize(
            model, ctx, batch_sizes, pp_degree, search, microbatch_policy
        )
        if not result.feasible:
            continue
        plan = _assemble_plan(model, result.batch_size, pp_degree, result.partition,
                              SearchOutcome(result.cost, result.strategies,
                                            result.stage_costs, result.n_micro))
        if plan.predicted_throughput > best.predicted_throughput:
            best = plan
        elif (plan.predicted_throughput == best.predicted_throughput
              and (plan.batch_size, plan.pp_degree) < (best.batch_size, best.pp_degree)):
            best = plan
    return best


def evaluate_plan_document(
    doc: dict,
    model: ModelSpec,
    cluster: ClusterSpec,
    profile: CostProfile,
) -> float:
    """Recompute a serialized plan's predicted time with the cost estimator."""
    ctx = EvalContext(model=model, cluster=cluster, profile=profile)
    n_micro = doc["n_micro"]
    micro = doc["batch_size"] // n_micro
    stage_costs = []
    for stage_idx, stage in enumerate(doc["stages"], start=1):
        layers = [model.layers[entry["id"]] for entry in stage["layers"]]
        strategies = [parse_strategy(entry["strategy"]) for entry in stage["layers"]]
        stage_costs.append(stage_cost(
            layers, strategies, micro, ctx, stage_index=stage_idx, n_micro=n_micro
        ))
    return pipeline_cost(stage_costs, n_micro)


@dataclass(frozen=True)
class OracleResult:
    feasible: bool
    cost: float
    pp_degree: int = 0
    partition: tuple[int, ...] = ()
    n_micro: int = 0
    strategies: tuple[ParallelStrategy, ...] = ()


def _compositions(total: int, parts: int):
    """All ordered splits of `total` layers into `parts` nonempty stages."""
    if parts == 1:
        yield (total,)
        return
    for head in range(1, total - parts + 2):
        for rest in _compositions(total - head, parts - 1):
            yield (head,) + rest


def brute_force_oracle(
    model: ModelSpec,
    cluster: ClusterSpec,
    profile: CostProfile,
    batch: int,
    max_layers: int = 4,
    max_devices: int = 4,
) -> OracleResult:
    """Exhaustive minimum over (P, partition, per-layer strategies, m).

    Shares every cost function with the planner; guarded to tiny instances.
    """
    if model.num_layers > max_layers:
        raise ValueError(f"oracle limited to {max_layers} layers, got {model.num_layers}")
    if cluster.n_devices > max_devices:
        raise ValueError(f"oracle limited to {max_devices} devices, got {cluster.n_devices}")
    ctx = EvalContext(model=model, cluster=cluster, profile=profile)
    budget = cluster.mem_budget_bytes
    layers = list(model.layers)
    n_layers = len(layers)

    best: OracleResult = OracleResult(feasible=False, cost=INF)
    for pp_degree in candidate_pp_degrees(cluster.n_devices):
        if pp_degree > n_layers:
            continue
        sset = prune_dp_sdp(enumerate_strategies(cluster.n_devices, pp_degree))
        for n_micro in range(1, batch + 1):
            if batch % n_micro != 0:
                continue
            micro = batch // n_micro
            cands = [s for s in sset if micro % s.data_degree == 0]
            if not cands:
                continue
            # Per-(layer, strategy) pieces, combined per assignment below.
            times = [[_layer_times(l, s, micro, cluster, profile) for s in cands] for l in layers]
            mems = [
                [layer_memory(l, s, micro, 1, 1, ctx.ms_multiplier) for s in cands]
                for l in layers
            ]
            for partition in _compositions(n_layers, pp_degree):
                for choice in product(range(len(cands)), repeat=n_layers):
                    stage_costs = []
                    feasible = True
                    start = 0
                    for stage_idx, size in enumerate(partition, start=1):
                        span = range(start, start + size)
                        stash = min(pp_degree - stage_idx + 1, n_micro)
                        t = t_ns = 0.0
                        prev = None
                        prefix_f = 0.0
                        peak = 0.0
                        total_ms = 0.0
                        for li in span:
                            s = cands[choice[li]]
                            lt, lt_ns = times[li][choice[li]]
                            r = transform_cost(layers[li], prev, s, micro, cluster)
                            t += lt + r
                            t_ns += lt_ns + r
                            o_f, o_b, o_ms = mems[li][choice[li]]
                            prefix_f += o_f * stash
                            peak = max(peak, prefix_f + o_b)
                            total_ms += o_ms
                            prev = s
                        if stage_idx > 1:
                            p2p = stage_p2p_time(layers[span[0]], micro, pp_degree, cluster)
                            t += p2p
                            t_ns += p2p
                        e_all = peak + total_ms
                        if e_all > budget:
                            feasible = False
                            break
                        stage_costs.append(StageCost(t, t_ns, e_all))
                        start += size
                    if not feasible:
                        continue
                    cost = pipeline_cost(stage_costs, n_micro)
                    if cost < best.cost:
                        best = OracleResult(
                            feasible=True,
                            cost=cost,
                            pp_degree=pp_degree,
                            partition=partition,
                            n_micro=n_micro,
                            strategies=tuple(cands[c] for c in choice),
                        )
    return best
