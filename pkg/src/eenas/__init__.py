"""Hardware-aware search for early-exit networks on a modeled edge accelerator."""

from .arch import (
    BackboneSpec,
    BlockSpec,
    Chromosome,
    EennArchitecture,
    ExitHeadSpec,
    ExitPlacement,
    QuantScheme,
    SpaceConfig,
    builtin_backbone,
    chromosome_hash,
    decode,
    encode,
    enumerate_space,
    load_backbone,
    parse_backbone,
    sample_architecture,
    search_space_size,
    static_counterpart,
)
from .evaluate import (
    EvaluationReport,
    OracleConfig,
    TrainingConfig,
    acc_avg,
    exit_decision,
    exit_ratios,
    load_external_report,
    make_toy_dataset,
    save_external_report,
    scalarized_loss,
    synthetic_oracle,
    train_toy,
)
from .hwcost import (
    AcceleratorSpec,
    AllocationPlan,
    HwCostReport,
    LayerCost,
    allocate,
    cost_report,
    et_avg,
    et_subnetwork,
    layer_cost,
    overhead_ratio,
)
from .predict import LabeledRecord, LabeledSet, Predictor, featurize, fit, predict
from .quant import (
    QuantParams,
    calibrate_clip,
    fake_quant_forward,
    quantize,
    scale_factor,
)
from .search import (
    NasConfig,
    OracleEvaluator,
    SearchState,
    ToyEvaluator,
    audit_history,
    et_reduction,
    mac_reduction,
    pareto_front,
    run_search,
)
from .workload import LayerGraph, LayerNode, cumulative_macs, expand_layers

__version__ = "0.1.0"
