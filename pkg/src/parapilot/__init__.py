"""parapilot: hybrid-parallelism planning for layered Transformer training.

Given a layer-wise model description and a GPU cluster description, the
planner searches combinations of data / sharded-data / tensor / pipeline
parallelism and activation checkpointing, and returns the per-layer strategy,
pipeline partition, and batch size with the best predicted throughput under
the per-device memory budget.
"""

from .balance import (
    BalanceReport,
    PipelinePartition,
    adjust_partition,
    balance_degrees,
    bi_objective_optimize,
    init_partition_memory_balanced,
    init_partition_time_balanced,
    validate_partition,
)
from .costs import (
    EvalContext,
    LayerCost,
    StageCost,
    comm_time,
    compute_time,
    layer_memory,
    layer_time,
    memory_footprint,
    pipeline_cost,
    stage_cost,
    transform_cost,
)
from .dpsearch import DpResult, backward_peak_bound, dp_search
from .errors import (
    DivisibilityError,
    InfeasiblePlanError,
    SpecError,
    UnsupportedDeviceCountError,
)
from .planner import (
    Plan,
    PlannerOptions,
    brute_force_oracle,
    galvatron_base,
    galvatron_search,
    init_microbatch_num,
    plan_full,
)
from .specs import (
    ClusterSpec,
    CostProfile,
    LayerSpec,
    ModelSpec,
    load_cluster_spec,
    load_cost_profile,
    load_model_spec,
)
from .strategies import (
    ParallelStrategy,
    StrategySet,
    build_decision_trees,
    count_strategies,
    enumerate_strategies,
    parse_strategy,
    prune_dp_sdp,
)

__version__ = "0.1.0"

__all__ = [
    "BalanceReport",
    "ClusterSpec",
    "CostProfile",
    "DivisibilityError",
    "DpResult",
    "EvalContext",
    "InfeasiblePlanError",
    "LayerCost",
    "LayerSpec",
    "ModelSpec",
    "ParallelStrategy",
    "PipelinePartition",
    "Plan",
    "PlannerOptions",
    "SpecError",
    "StageCost",
    "StrategySet",
    "UnsupportedDeviceCountError",
    "adjust_partition",
    "backward_peak_bound",
    "balance_degrees",
    "bi_objective_optimize",
    "brute_force_oracle",
    "build_decision_trees",
    "comm_time",
    "compute_time",
    "count_strategies",
    "dp_search",
    "enumerate_strategies",
    "galvatron_base",
    "galvatron_search",
    "init_microbatch_num",
    "init_partition_memory_balanced",
    "init_partition_time_balanced",
    "layer_memory",
    "layer_time",
    "load_cluster_spec",
    "load_cost_profile",
    "load_model_spec",
    "memory_footprint",
    "parse_strategy",
    "pipeline_cost",
    "plan_full",
    "prune_dp_sdp",
    "stage_cost",
    "transform_cost",
    "validate_partition",
]
