"""Per-stage strategy search: minimise stage time under the device memory budget.

The state transition optimises C(l, e_fwd) over per-layer strategies, where
e_fwd constrains the bucketed forward footprint (activations + model states).
The previous layer's strategy is part of the state so transformation costs are
exact.  Feasibility against the full backward-peak budget is checked by
sweeping e_fwd upward: checks are provably unnecessary while
e_fwd <= budget - b_up (b_up bounds the backward peak), and the plan at the
largest e_fwd whose true peak fits is returned.

Bucket rounding is conservative: per-layer forward weights are rounded up, so
a plan accepted at some e_fwd never understates its true footprint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .costs import EvalContext, _layer_times, layer_memory, memory_footprint, transform_cost
from .errors import DivisibilityError
from .specs import LayerSpec
from .strategies import ParallelStrategy, StrategySet

# Table memory guard: buckets * |S| * 8 bytes per DP row.
MAX_BUCKETS = 1_000_000

INF = float("inf")


@dataclass(frozen=True)
class DpResult:
    time_s: float
    strategies: tuple[ParallelStrategy, ...] | None
    e_fwd_used: float
    feasible: bool
    frontier: tuple[tuple[float, float], ...] | None = None


def _usable_strategies(strategies: StrategySet, micro_batch: int) -> list[ParallelStrategy]:
    return [s for s in strategies if micro_batch % s.data_degree == 0]


def backward_peak_bound(
    stage_layers: list[LayerSpec],
    strategies: StrategySet,
    micro_batch: int,
    ms_multiplier: float,
) -> float:
    """b_up: the largest backward activation any (layer, strategy) pair can pin."""
    usable = _usable_strategies(strategies, micro_batch)
    peak = 0.0
    for layer in stage_layers:
        for s in usable:
            _, o_b, _ = layer_memory(layer, s, micro_batch, 1, 1, ms_multiplier)
            peak = max(peak, o_b)
    return peak


@dataclass
class _Unit:
    """A run of identical consecutive layers forced onto one strategy."""

    first: LayerSpec
    count: int
    layer_ids: tuple[int, ...]


def _build_units(stage_layers: list[LayerSpec], fuse: bool) -> list[_Unit]:
    if not fuse:
        return [_Unit(first=l, count=1, layer_ids=(l.id,)) for l in stage_layers]

    def shape_key(l: LayerSpec):
        return (l.kind, l.param_bytes, l.bnd_bytes_per_sample, l.int_bytes_per_sample,
                l.fwd_time_per_sample, l.tp_act_replication_fraction)

    units: list[_Unit] = []
    for layer in stage_layers:
        if units and shape_key(units[-1].first) == shape_key(layer):
            units[-1].count += 1
            units[-1].layer_ids += (layer.id,)
        else:
            units.append(_Unit(first=layer, count=1, layer_ids=(layer.id,)))
    return units


def dp_search(
    stage_layers: list[LayerSpec],
    budget_bytes: float,
    strategies: StrategySet,
    micro_batch: int,
    granularity_bytes: int,
    ctx: EvalContext,
    stage_index: int = 1,
    n_micro: int = 1,
    fuse_identical: bool = False,
    approx_prev: bool = False,
    collect_frontier: bool = False,
) -> DpResult:
    """Optimal per-layer strategy assignment for one pipeline stage."""
    if granularity_bytes <= 0:
        raise ValueError(f"granularity_bytes must be positive, got {granularity_bytes}")
    if budget_bytes < 0:
        raise ValueError(f"budget_bytes must be non-negative, got {budget_bytes}")
    if not stage_layers:
        raise ValueError("stage must contain at least one layer")
    if micro_batch < 1:
        raise DivisibilityError(f"micro-batch must be >= 1, got {micro_batch}")

    cands = _usable_strategies(strategies, micro_batch)
    n_buckets = int(budget_bytes // granularity_bytes)
    if n_buckets > MAX_BUCKETS:
        raise ValueError(
            f"budget/granularity yields {n_buckets} buckets (> {MAX_BUCKETS}); "
            f"increase the memory granularity"
        )
    infeasible = DpResult(time_s=INF, strategies=None, e_fwd_used=0.0, feasible=False)
    if not cands or n_buckets == 0:
        return infeasible

    units = _build_units(stage_layers, fuse_identical)
    n_units = len(units)
    n_s = len(cands)

    # Per-(unit, strategy) cost rows.  A fused run of k identical layers costs
    # k times the single layer in time and forward footprint, while its
    # backward peak stays the single layer's (one backward at a time, and the
    # in-block forward stash already peaks at the last inner layer).
    time_c = np.empty((n_units, n_s))
    ef_true = np.empty((n_units, n_s))
    ob = np.empty((n_units, n_s))
    weight = np.empty((n_units, n_s), dtype=np.int64)
    for ui, unit in enumerate(units):
        for sj, strat in enumerate(cands):
            t, _ = _layer_times(unit.first, strat, micro_batch, ctx.cluster, ctx.profile)
            o_f, o_b, o_ms = layer_memory(
                unit.first, strat, micro_batch, stage_index, n_micro, ctx.ms_multiplier
            )
            time_c[ui, sj] = t * unit.count
            ef_true[ui, sj] = (o_f + o_ms) * unit.count
            ob[ui, sj] = o_b
            weight[ui, sj] = math.ceil((o_f + o_ms) * unit.count / granularity_bytes)
    weight = np.maximum(weight, 0)

    # Transformation matrices between consecutive units; identical boundary
    # shapes share one matrix.
    r_cache: dict[int, np.ndarray] = {}

    def r_matrix(layer: LayerSpec) -> np.ndarray:
        key = layer.bnd_bytes_per_sample
        mat = r_cache.get(key)
        if mat is None:
            mat = np.empty((n_s, n_s))
            for i, s_prev in enumerate(cands):
                for j, s_cur in enumerate(cands):
                    mat[i, j] = transform_cost(layer, s_prev, s_cur, micro_batch, ctx.cluster)
            r_cache[key] = mat
        return mat

    b_up = float(ob.max(initial=0.0))
    safe_limit = budget_bytes - b_up

    if approx_prev:
        ranked_at, reconstruct = _run_dp_collapsed(
            units, cands, time_c, weight, ef_true, r_matrix, n_buckets
        )
    else:
        ranked_at, reconstruct = _run_dp_exact(
            units, cands, time_c, weight, ef_true, r_matrix, n_buckets
        )

    # Sweep e_fwd upward.  Inside the safe zone every plan fits (its peak is
    # bounded by e_fwd + b_up), so only the cheapest candidate matters; beyond
    # it, the per-final-strategy candidates are tried cheapest-first until one
    # passes the true backward-peak check — the cheapest path can exceed the
    # peak budget while a near-equal one fits.  Ties on time resolve toward
    # the larger forward budget, so the recorded plan sits at the largest
    # feasible e_fwd among the fastest ones.
    validity_cache: dict[tuple[int, ...], bool] = {}

    def plan_fits(unit_choice: tuple[int, ...]) -> bool:
        ok = validity_cache.get(unit_choice)
        if ok is None:
            plan = _expand(units, cands, unit_choice)
            e_all, _ = memory_footprint(
                stage_layers, plan, micro_batch, stage_index, n_micro, ctx.ms_multiplier
            )
            ok = e_all <= budget_bytes
            validity_cache[unit_choice] = ok
        return ok

    frontier: list[tuple[float, float]] = []
    best: tuple[float, float, tuple[int, ...]] | None = None  # (time, e_fwd, unit choices)
    for e in range(1, n_buckets + 1):
        ranked = ranked_at(e)
        if collect_frontier:
            frontier.append((e * granularity_bytes, ranked[0][0] if ranked else INF))
        e_fwd = e * granularity_bytes
        in_safe_zone = e_fwd <= safe_limit
        for t, j in ranked:
            if best is not None and t > best[0]:
                break
            unit_choice = reconstruct(e, j)
            if in_safe_zone or plan_fits(unit_choice):
                best = (t, e_fwd, unit_choice)
                break

    if best is None:
        if collect_frontier:
            return DpResult(INF, None, 0.0, False, frontier=tuple(frontier))
        return infeasible

    t_best, e_fwd, unit_choice = best
    plan = _expand(units, cands, unit_choice)
    e_all, _ = memory_footprint(
        stage_layers, plan, micro_batch, stage_index, n_micro, ctx.ms_multiplier
    )
    assert e_all <= budget_bytes, "dp_search produced a plan exceeding the memory budget"
    return DpResult(
        time_s=t_best,
        strategies=tuple(plan),
        e_fwd_used=float(e_fwd),
        feasible=True,
        frontier=tuple(frontier) if collect_frontier else None,
    )


def _expand(units: list[_Unit], cands: list[ParallelStrategy], unit_choice) -> list[ParallelStrategy]:
    plan: list[ParallelStrategy] = []
    for unit, sj in zip(units, unit_choice):
        plan.extend([cands[sj]] * unit.count)
    return plan


def _lex_pick(times: np.ndarray, tiebreak: np.ndarray) -> int:
    """First index minimising (time, tiebreak)."""
    t_min = times.min()
    mask = times == t_min
    tb = np.where(mask, tiebreak, INF)
    return int(np.argmax(mask & (tb == tb.min())))


def _run_dp_exact(units, cands, time_c, weight, ef_true, r_matrix, n_buckets):
    """Full state (unit, e_fwd bucket, strategy); exact transformation costs."""
    n_units = len(units)
    n_s = len(cands)
    n_e = n_buckets + 1

    table = np.full((n_e, n_s), INF)
    fwd = np.full((n_e, n_s), INF)  # true forward bytes, used only to break ties
    parents = np.zeros((n_units, n_e, n_s), dtype=np.int16)

    for j in range(n_s):
        w = weight[0, j]
        if w <= n_buckets:
            table[w:, j] = time_c[0, j]
            fwd[w:, j] = ef_true[0, j]

    for ui in range(1, n_units):
        r_edge = r_matrix(units[ui].first)
        new_table = np.full((n_e, n_s), INF)
        new_fwd = np.full((n_e, n_s), INF)
        for j in range(n_s):
            w = weight[ui, j]
            if w > n_buckets:
                continue
            src_t = table[: n_e - w, :]          # (n_e - w, n_s)
            src_f = fwd[: n_e - w, :]
            cand = src_t + r_edge[:, j][None, :]
            t_min = cand.min(axis=1)
            mask = cand == t_min[:, None]
            f_masked = np.where(mask, src_f, INF)
            f_min = f_masked.min(axis=1)
            parent = np.argmax(mask & (f_masked == f_min[:, None]), axis=1)
            rows = np.arange(n_e - w)
            new_table[w:, j] = t_min + time_c[ui, j]
            new_fwd[w:, j] = src_f[rows, parent] + ef_true[ui, j]
            parents[ui, w:, j] = parent
        table = new_table
        fwd = new_fwd

    def ranked_at(e: int) -> list[tuple[float, int]]:
        row = table[e]
        order = sorted(
            (j for j in range(n_s) if math.isfinite(row[j])),
            key=lambda j: (row[j], fwd[e, j], j),
        )
        return [(float(row[j]), j) for j in order]

    def reconstruct(e: int, j: int) -> tuple[int, ...]:
        picks = [0] * n_units
        cur_e = e
        for ui in range(n_units - 1, 0, -1):
            picks[ui] = j
            parent = int(parents[ui, cur_e, j])
            cur_e -= int(weight[ui, j])
            j = parent
        picks[0] = j
        return tuple(picks)

    return ranked_at, reconstruct


def _run_dp_collapsed(units, cands, time_c, weight, ef_true, r_matrix, n_buckets):
    """Best-predecessor approximation: state (unit, e_fwd) only.

    Transformation costs are charged against the single strategy recorded per
    cell instead of all predecessors; cheaper by a factor |S| but may miss
    assignments whose optimal predecessor differs from the recorded one.
    """
    n_units = len(units)
    n_s = len(cands)
    n_e = n_buckets + 1

    table = np.full(n_e, INF)
    fwd = np.full(n_e, INF)
    choice = np.full((n_units, n_e), -1, dtype=np.int16)

    first = np.full((n_e, n_s), INF)
    first_f = np.full((n_e, n_s), INF)
    for j in range(n_s):
        w = weight[0, j]
        if w <= n_buckets:
            first[w:, j] = time_c[0, j]
            first_f[w:, j] = ef_true[0, j]
    for e in range(n_e):
        if np.isfinite(first[e]).any():
            j = _lex_pick(first[e], first_f[e])
            table[e] = first[e, j]
            fwd[e] = first_f[e, j]
            choice[0, e] = j

    for ui in range(1, n_units):
        r_edge = r_matrix(units[ui].first)
        cand = np.full((n_e, n_s), INF)
        cand_f = np.full((n_e, n_s), INF)
        prev_j = choice[ui - 1]
        for j in range(n_s):
            w = weight[ui, j]
            if w > n_buckets:
                continue
            src = np.arange(n_e - w)
            ok = prev_j[src] >= 0
            r_term = np.where(ok, r_edge[np.maximum(prev_j[src], 0), j], INF)
            cand[w:, j] = table[src] + r_term + time_c[ui, j]
            cand_f[w:, j] = fwd[src] + ef_true[ui, j]
        new_table = np.full(n_e, INF)
        new_fwd = np.full(n_e, INF)
        for e in range(n_e):
            if np.isfinite(cand[e]).any():
                j = _lex_pick(cand[e], cand_f[e])
                new_table[e] = cand[e, j]
                new_fwd[e] = cand_f[e, j]
                choice[ui, e] = j
        table = new_table
        fwd = new_fwd

    def ranked_at(e: int) -> list[tuple[float, int]]:
        # one recorded path per cell; the pseudo-candidate index is unused
        if math.isfinite(table[e]):
            return [(float(table[e]), 0)]
        return []

    def reconstruct(e: int, _j: int) -> tuple[int, ...]:
        picks = [0] * n_units
        cur_e = e
        for ui in range(n_units - 1, -1, -1):
            j = int(choice[ui, cur_e])
            picks[ui] = j
            cur_e -= int(weight[ui, j])
        return tuple(picks)

    return ranked_at, reconstruct
