import math
import random

import pytest

from parapilot.costs import layer_memory, layer_time, memory_footprint, transform_cost
from parapilot.dpsearch import backward_peak_bound, dp_search
from parapilot.specs import CostProfile
from parapilot.strategies import (
    DP,
    SDP,
    TP,
    ParallelStrategy,
    StrategySet,
    enumerate_strategies,
    prune_dp_sdp,
)

from helpers import (
    dp_stage_oracle,
    fuzz_dp_instance,
    make_cluster,
    make_ctx,
    uniform_model,
)

INF = float("inf")


def subset(sset, indices):
    return StrategySet(
        group_size=sset.group_size,
        strategies=tuple(sset.strategies[i] for i in indices),
    )


def small_context(n_layers=3, n_devices=4, budget=4096):
    model = uniform_model(n_layers, param=64, bnd=16, intb=96, fwd=0.01)
    cluster = make_cluster(n=n_devices, budget=budget, intra=1e6)
    return model, make_ctx(model, cluster)


class TestBasics:
    def test_single_layer_single_strategy(self):
        model, ctx = small_context(n_layers=1, budget=100_000)
        sset = subset(prune_dp_sdp(enumerate_strategies(4, 1)), [0])
        res = dp_search(list(model.layers), 100_000, sset, 8, 1, ctx)
        assert res.feasible
        assert res.strategies == (sset.strategies[0],)
        expect = layer_time(model.layers[0], sset.strategies[0], 8, ctx.cluster, ctx.profile)
        assert res.time_s == pytest.approx(expect)

    def test_budget_below_first_layer_is_infeasible(self):
        model, ctx = small_context(n_layers=1)
        sset = prune_dp_sdp(enumerate_strategies(4, 1))
        res = dp_search(list(model.layers), 2, sset, 8, 1, ctx)
        assert not res.feasible
        assert res.time_s == INF
        assert res.strategies is None

    def test_zero_budget(self):
        model, ctx = small_context(n_layers=1)
        sset = prune_dp_sdp(enumerate_strategies(4, 1))
        res = dp_search(list(model.layers), 0, sset, 8, 64, ctx)
        assert not res.feasible

    def test_invalid_granularity(self):
        model, ctx = small_context()
        sset = prune_dp_sdp(enumerate_strategies(4, 1))
        with pytest.raises(ValueError):
            dp_search(list(model.layers), 1000, sset, 8, 0, ctx)

    def test_mixed_assignment_matches_brute_force(self):
        model, ctx = small_context(n_layers=3)
        full = prune_dp_sdp(enumerate_strategies(4, 1))
        sset = subset(full, [0, 2, 6, 10])
        budgets = sorted({
            int(memory_footprint(list(model.layers), [s] * 3, 8, 1, 1, 4.0)[0])
            for s in sset
        })
        tight = budgets[0] + (budgets[-1] - budgets[0]) // 3
        res = dp_search(list(model.layers), tight, sset, 8, 1, ctx)
        oracle_time, oracle_assign = dp_stage_oracle(
            list(model.layers), list(sset), 8, tight, ctx
        )
        assert res.feasible == (oracle_time < INF)
        if res.feasible:
            assert res.time_s == pytest.approx(oracle_time, rel=1e-12)

    def test_feasible_result_respects_budget(self):
        rng = random.Random(3)
        for _ in range(30):
            model, cluster, ctx, sset, micro = fuzz_dp_instance(rng)
            res = dp_search(
                list(model.layers), cluster.mem_budget_bytes, sset, micro, 1, ctx
            )
            if res.feasible:
                e_all, _ = memory_footprint(
                    list(model.layers), list(res.strategies), micro, 1, 1, 4.0
                )
                assert e_all <= cluster.mem_budget_bytes


class TestBackwardPeakBound:
    def test_all_ckpt_off_gives_zero(self):
        model, ctx = small_context()
        sset = StrategySet(group_size=4, strategies=tuple(
            s for s in prune_dp_sdp(enumerate_strategies(4, 1)) if not s.ckpt
        ))
        assert backward_peak_bound(list(model.layers), sset, 8, 4.0) == 0.0

    def test_single_ckpt_strategy(self):
        model = uniform_model(1, param=1, bnd=1, intb=100_000_000, frac=0.0)
        s = ParallelStrategy(1, ((TP, 1 if False else 2),), True)
        s = ParallelStrategy(1, (), True)
        sset = StrategySet(group_size=1, strategies=(s,))
        bound = backward_peak_bound(list(model.layers), sset, 1, 4.0)
        assert bound == pytest.approx(100_000_000)

    def test_mixed_takes_the_max(self):
        model = uniform_model(2, param=16, bnd=16, intb=64, frac=0.0)
        plain = ParallelStrategy(1, ((DP, 2),), False)
        ck = ParallelStrategy(1, ((DP, 2),), True)
        sset = StrategySet(group_size=2, strategies=(plain, ck))
        per = layer_memory(model.layers[0], ck, 4, 1, 1, 4.0)[1]
        assert backward_peak_bound(list(model.layers), sset, 4, 4.0) == pytest.approx(per)


class TestSweepBehavior:
    def test_frontier_times_non_increasing(self):
        model, ctx = small_context(n_layers=3, budget=8192)
        sset = prune_dp_sdp(enumerate_strategies(4, 1))
        res = dp_search(
            list(model.layers), 8192, sset, 8, 16, ctx, collect_frontier=True
        )
        finite = [t for _, t in res.frontier if math.isfinite(t)]
        assert finite == sorted(finite, reverse=True)

    def test_budget_monotonicity(self):
        model, ctx = small_context(n_layers=3)
        sset = prune_dp_sdp(enumerate_strategies(4, 1))
        prev = INF
        for budget in (512, 1024, 2048, 4096, 8192):
            res = dp_search(list(model.layers), budget, sset, 8, 1, ctx)
            if res.feasible:
                assert res.time_s <= prev + 1e-12
                prev = min(prev, res.time_s)

    def test_optimal_substructure_inequality(self):
        model, ctx = small_context(n_layers=4, budget=16384)
        sset = prune_dp_sdp(enumerate_strategies(4, 1))
        res = dp_search(list(model.layers), 16384, sset, 8, 1, ctx)
        assert res.feasible
        prefix_len = 2
        prefix = list(model.layers[:prefix_len])
        chosen = list(res.strategies[:prefix_len])
        consumed = 0
        for layer, s in zip(prefix, chosen):
            o_f, _, o_ms = layer_memory(layer, s, 8, 1, 1, 4.0)
            consumed += math.ceil(o_f + o_ms)
        prefix_cost = 0.0
        prev = None
        for layer, s in zip(prefix, chosen):
            prefix_cost += layer_time(layer, s, 8, ctx.cluster, ctx.profile)
            prefix_cost += transform_cost(layer, prev, s, 8, ctx.cluster)
            prev = s
        sub = dp_search(prefix, consumed, sset, 8, 1, ctx)
        assert sub.feasible
        assert sub.time_s <= prefix_cost + 1e-12


class TestOracleFuzz:
    def test_exact_at_byte_granularity(self):
        rng = random.Random(20240813)
        checked = 0
        for _ in range(60):
            model, cluster, ctx, sset, micro = fuzz_dp_instance(rng)
            budget = cluster.mem_budget_bytes
            res = dp_search(list(model.layers), budget, sset, micro, 1, ctx)
            oracle_time, _ = dp_stage_oracle(list(model.layers), list(sset), micro, budget, ctx)
            assert res.feasible == (oracle_time < INF)
            if res.feasible:
                assert res.time_s == pytest.approx(oracle_time, rel=1e-12)
                checked += 1
        assert checked > 10

    def test_coarse_granularity_is_conservative(self):
        rng = random.Random(99)
        for _ in range(40):
            model, cluster, ctx, sset, micro = fuzz_dp_instance(rng)
            budget = cluster.mem_budget_bytes
            res = dp_search(list(model.layers), budget, sset, micro, 64, ctx)
            oracle_time, _ = dp_stage_oracle(list(model.layers), list(sset), micro, budget, ctx)
            if res.feasible:
                # rounding can only exclude plans, never invent cheaper ones
                assert oracle_time < INF
                assert res.time_s >= oracle_time - 1e-12


class TestKnobs:
    def test_fused_search_matches_on_generous_budget(self):
        model, ctx = small_context(n_layers=4, budget=1 << 19)
        sset = prune_dp_sdp(enumerate_strategies(4, 1))
        plain = dp_search(list(model.layers), 1 << 19, sset, 8, 1, ctx)
        fused = dp_search(list(model.layers), 1 << 19, sset, 8, 1, ctx, fuse_identical=True)
        assert fused.feasible and plain.feasible
        assert fused.time_s == pytest.approx(plain.time_s)
        assert fused.strategies == plain.strategies

    def test_fused_never_beats_exact(self):
        rng = random.Random(5)
        for _ in range(20):
            model, cluster, ctx, sset, micro = fuzz_dp_instance(rng)
            budget = cluster.mem_budget_bytes
            plain = dp_search(list(model.layers), budget, sset, micro, 1, ctx)
            fused = dp_search(list(model.layers), budget, sset, micro, 1, ctx, fuse_identical=True)
            if fused.feasible:
                assert plain.feasible
                assert fused.time_s >= plain.time_s - 1e-12

    def test_collapsed_prev_state_never_beats_exact(self):
        rng = random.Random(6)
        for _ in range(20):
            model, cluster, ctx, sset, micro = fuzz_dp_instance(rng)
            budget = cluster.mem_budget_bytes
            exact = dp_search(list(model.layers), budget, sset, micro, 1, ctx)
            approx = dp_search(list(model.layers), budget, sset, micro, 1, ctx, approx_prev=True)
            if approx.feasible:
                assert approx.time_s >= exact.time_s - 1e-12
                # reported time must match the reconstructed plan's true cost
                true_cost = 0.0
                prev = None
                for layer, s in zip(model.layers, approx.strategies):
                    true_cost += layer_time(layer, s, micro, ctx.cluster, ctx.profile)
                    true_cost += transform_cost(layer, prev, s, micro, ctx.cluster)
                    prev = s
                assert approx.time_s == pytest.approx(true_cost, rel=1e-12)
