"""Shared builders and independent oracles for the test suite.

The oracles here are deliberately naive (exhaustive enumeration, literal
formula transcription) so they stay independent of the implementation paths
they check.
"""

from __future__ import annotations

import random
from itertools import product

from parapilot.costs import EvalContext, _layer_times, memory_footprint, transform_cost
from parapilot.specs import (
    ClusterSpec,
    CostProfile,
    LayerSpec,
    ModelSpec,
    load_cluster_spec,
    load_model_spec,
)


def make_layer(
    layer_id=0,
    kind="enc",
    param=64,
    bnd=16,
    intb=32,
    fwd=0.01,
    frac=0.25,
) -> LayerSpec:
    return LayerSpec(
        id=layer_id,
        kind=kind,
        param_bytes=param,
        bnd_bytes_per_sample=bnd,
        int_bytes_per_sample=intb,
        fwd_time_per_sample=fwd,
        tp_act_replication_fraction=frac,
    )


def uniform_model(
    n_layers=4,
    param=100_000_000,
    bnd=10_000_000,
    intb=100_000_000,
    fwd=0.01,
    frac=0.25,
    ms_mult=4.0,
    name="uniform",
) -> ModelSpec:
    return load_model_spec({
        "name": name,
        "ms_bytes_per_param_byte": ms_mult,
        "layers": [
            {
                "kind": "enc",
                "param_bytes": param,
                "bnd_bytes_per_sample": bnd,
                "int_bytes_per_sample": intb,
                "fwd_time_per_sample": fwd,
                "tp_act_replication_fraction": frac,
            }
            for _ in range(n_layers)
        ],
    })


def make_cluster(
    n=4,
    budget=8 * 2**30,
    island=None,
    intra=12e9,
    inter=None,
    slowdown=1.3,
) -> ClusterSpec:
    return load_cluster_spec({
        "n_devices": n,
        "mem_budget_bytes": budget,
        "island_size": island if island is not None else n,
        "intra_island_bw": intra,
        "inter_island_bw": inter if inter is not None else intra,
        "overlap_slowdown": slowdown,
    })


def make_ctx(model, cluster, profile=None) -> EvalContext:
    return EvalContext(model=model, cluster=cluster, profile=profile or CostProfile())


def random_tiny_model(rng: random.Random, n_layers: int, byte_unit: int = 16) -> ModelSpec:
    """Tiny integer byte sizes in multiples of 16 so every per-device split is integral."""
    layers = []
    for _ in range(n_layers):
        layers.append({
            "kind": "enc",
            "param_bytes": byte_unit * rng.randint(1, 8),
            "bnd_bytes_per_sample": byte_unit * rng.randint(1, 4),
            "int_bytes_per_sample": byte_unit * rng.randint(0, 8),
            "fwd_time_per_sample": rng.uniform(0.001, 0.05),
        })
    return load_model_spec({"name": "tiny", "ms_bytes_per_param_byte": 4.0, "layers": layers})


def dp_stage_oracle(stage_layers, strategies, micro_batch, budget, ctx,
                    stage_index=1, n_micro=1):
    """Exhaustive minimum of sum(c) + sum(R) subject to E_all <= budget.

    Returns (best_time, best_assignment) with best_time = inf when nothing fits.
    """
    cands = [s for s in strategies if micro_batch % s.data_degree == 0]
    best_time = float("inf")
    best_assign = None
    for choice in product(cands, repeat=len(stage_layers)):
        time = 0.0
        prev = None
        for layer, strat in zip(stage_layers, choice):
            t, _ = _layer_times(layer, strat, micro_batch, ctx.cluster, ctx.profile)
            time += t + transform_cost(layer, prev, strat, micro_batch, ctx.cluster)
            prev = strat
        e_all, _ = memory_footprint(
            list(stage_layers), list(choice), micro_batch, stage_index, n_micro,
            ctx.ms_multiplier,
        )
        if e_all <= budget and time < best_time:
            best_time = time
            best_assign = choice
    return best_time, best_assign


def fuzz_dp_instance(rng: random.Random):
    """Random tiny stage-search instance with integral per-device byte weights.

    Byte sizes are multiples of 16 so divisions by degrees up to 4 (and the
    0.25 TP replication fraction) stay integral, which keeps 1-byte bucket
    rounding exact.
    """
    from parapilot.strategies import enumerate_strategies, prune_dp_sdp
    from parapilot.specs import CostProfile

    n_layers = rng.randint(1, 4)
    model = random_tiny_model(rng, n_layers)
    n_devices = rng.choice([2, 4])
    pp_degree = rng.choice([p for p in (1, 2) if p <= n_devices])
    pool = list(prune_dp_sdp(enumerate_strategies(n_devices, pp_degree)))
    k = rng.randint(1, min(6, len(pool)))
    chosen = sorted(rng.sample(range(len(pool)), k))
    from parapilot.strategies import StrategySet

    sset = StrategySet(
        group_size=n_devices // pp_degree,
        strategies=tuple(pool[i] for i in chosen),
    )
    micro_batch = rng.choice([4, 8])
    cluster = make_cluster(
        n=n_devices,
        budget=1,  # replaced below
        island=n_devices,
        intra=rng.choice([0.5, 1.0, 2.0]),
        slowdown=rng.choice([1.0, 1.3]),
    )
    ctx = make_ctx(model, cluster, CostProfile())

    # Budget around the cheapest per-layer footprints so instances range from
    # infeasible through tight to roomy.
    from parapilot.costs import layer_memory

    usable = [s for s in sset if micro_batch % s.data_degree == 0]
    if not usable:
        budget = 64
    else:
        floor_total = 0.0
        ob_max = 0.0
        for layer in model.layers:
            per = [layer_memory(layer, s, micro_batch, 1, 1, 4.0) for s in usable]
            floor_total += min(o_f + o_ms for o_f, _, o_ms in per)
            ob_max = max(ob_max, max(o_b for _, o_b, _ in per))
        budget = int(floor_total * rng.uniform(0.8, 2.0) + ob_max * rng.uniform(0.0, 1.0))
    cluster = make_cluster(
        n=cluster.n_devices,
        budget=max(budget, 1),
        island=cluster.island_size,
        intra=cluster.intra_island_bw,
        slowdown=cluster.overlap_slowdown,
    )
    ctx = make_ctx(model, cluster, ctx.profile)
    return model, cluster, ctx, sset, micro_batch


def literal_e_all(stage_layers, strategies, micro_batch, stage_index, n_micro, ms_multiplier):
    """Direct transcription of the backward-peak maximum, recomputed per prefix."""
    from parapilot.costs import layer_memory

    parts = [
        layer_memory(l, s, micro_batch, stage_index, n_micro, ms_multiplier)
        for l, s in zip(stage_layers, strategies)
    ]
    total_ms = 0.0
    for o_f, o_b, o_ms in parts:
        total_ms += o_ms
    best = 0.0
    for i in range(len(parts)):
        prefix_f = 0.0
        for k in range(i + 1):
            prefix_f += parts[k][0]
        best = max(best, prefix_f + parts[i][1] + total_ms)
    return best
