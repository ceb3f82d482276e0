"""Command-line entry points.

Exit codes: 0 on success (feasible plan), 2 when no plan fits the memory
budget, 1 on malformed inputs.
"""

from __future__ import annotations

import argparse
import json
import sys

from .costs import EvalContext, layer_cost, stage_cost
from .errors import InfeasiblePlanError, SpecError
from .planner import PlannerOptions, brute_force_oracle, plan_full
from .specs import (
    CostProfile,
    load_cluster_spec_file,
    load_cost_profile_file,
    load_model_spec_file,
)
from .strategies import count_strategies, parse_strategy

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_INFEASIBLE = 2


def _dump(doc, path: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _load_inputs(args):
    model = load_model_spec_file(args.model)
    cluster = load_cluster_spec_file(args.cluster)
    if args.profile:
        profile = load_cost_profile_file(args.profile, model)
    else:
        profile = CostProfile()
    return model, cluster, profile


def _add_input_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", required=True, help="model.json path")
    parser.add_argument("--cluster", required=True, help="cluster.json path")
    parser.add_argument("--profile", default=None, help="profile.json path (optional)")


def _cmd_plan(args) -> int:
    model, cluster, profile = _load_inputs(args)
    opts = PlannerOptions(
        batch_step=args.batch_step,
        max_batch=args.max_batch,
        granularity_bytes=args.mem_granularity_mb * 2**20,
        bi_objective=args.bi_objective,
        batch_radius=args.batch_radius,
        fuse_identical=args.fuse_layers,
        approx_prev=args.approx_prev,
    )
    try:
        plan = plan_full(model, cluster, profile, opts)
    except InfeasiblePlanError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, indent=2, sort_keys=True), file=sys.stderr)
        return EXIT_INFEASIBLE
    _dump(plan.to_document(cluster), args.output)
    return EXIT_OK


def _cmd_oracle(args) -> int:
    model, cluster, profile = _load_inputs(args)
    result = brute_force_oracle(model, cluster, profile, args.batch)
    if not result.feasible:
        print("infeasible: no configuration fits the memory budget", file=sys.stderr)
        return EXIT_INFEASIBLE
    _dump({
        "pp_degree": result.pp_degree,
        "partition": list(result.partition),
        "n_micro": result.n_micro,
        "batch_size": args.batch,
        "predicted_time_s": result.cost,
        "predicted_throughput": args.batch / result.cost,
        "strategies": [s.to_string(cluster) for s in result.strategies],
    }, args.output)
    return EXIT_OK


def _cmd_count(args) -> int:
    counts = count_strategies(args.devices, prune=not args.no_prune)
    for p, n in counts.items():
        print(f"pp={p}: {n}")
    print(f"total: {sum(counts.values())}")
    return EXIT_OK


def _cmd_estimate(args) -> int:
    model, cluster, profile = _load_inputs(args)
    strategy = parse_strategy(args.strategy)
    ctx = EvalContext(model=model, cluster=cluster, profile=profile)
    layers = list(model.layers)
    rows = []
    for layer in layers:
        lc = layer_cost(
            layer, strategy, args.micro_batch, ctx,
            stage_index=args.stage_index, n_micro=args.n_micro,
        )
        rows.append({
            "id": layer.id,
            "kind": layer.kind,
            "time_s": lc.time_s,
            "time_no_sync_s": lc.time_no_sync_s,
            "mem_fwd_bytes": lc.mem_fwd_bytes,
            "mem_bwd_bytes": lc.mem_bwd_bytes,
            "mem_states_bytes": lc.mem_states_bytes,
        })
    sc = stage_cost(
        layers, [strategy] * len(layers), args.micro_batch, ctx,
        stage_index=args.stage_index, n_micro=args.n_micro,
    )
    _dump({
        "strategy": strategy.to_string(cluster),
        "micro_batch": args.micro_batch,
        "layers": rows,
        "stage": {
            "time_s": sc.time_s,
            "time_no_sync_s": sc.time_no_sync_s,
            "peak_mem_bytes": sc.peak_mem_bytes,
        },
    }, args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parapilot",
        description="Hybrid-parallelism planner for layered Transformer training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    plan = sub.add_parser("plan", help="search for the highest-throughput plan")
    _add_input_args(plan)
    plan.add_argument("--batch-step", type=int, default=8)
    plan.add_argument("--max-batch", type=int, default=4096)
    plan.add_argument("--mem-granularity-mb", type=int, default=64)
    plan.add_argument("--bi-objective", action="store_true",
                      help="refine pipeline partitions around the base optimum")
    plan.add_argument("--batch-radius", type=int, default=16)
    plan.add_argument("--fuse-layers", action="store_true",
                      help="fuse runs of identical layers during the per-stage search")
    plan.add_argument("--approx-prev", action="store_true",
                      help="collapse the previous-strategy DP dimension (faster, approximate)")
    plan.add_argument("-o", "--output", default=None)
    plan.set_defaults(func=_cmd_plan)

    oracle = sub.add_parser("oracle", help="exhaustive optimum for tiny instances")
    _add_input_args(oracle)
    oracle.add_argument("--batch", type=int, required=True)
    oracle.add_argument("-o", "--output", default=None)
    oracle.set_defaults(func=_cmd_oracle)

    count = sub.add_parser("count-strategies", help="candidate strategies per pipeline degree")
    count.add_argument("--devices", type=int, required=True)
    count.add_argument("--no-prune", action="store_true")
    count.set_defaults(func=_cmd_count)

    estimate = sub.add_parser("estimate", help="cost one strategy over the whole model")
    _add_input_args(estimate)
    estimate.add_argument("--strategy", required=True,
                          help="canonical strategy string, e.g. pp2/tp2/dp2/ckpt")
    estimate.add_argument("--micro-batch", type=int, required=True)
    estimate.add_argument("--n-micro", type=int, default=1)
    estimate.add_argument("--stage-index", type=int, default=1)
    estimate.add_argument("-o", "--output", default=None)
    estimate.set_defaults(func=_cmd_estimate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SpecError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
