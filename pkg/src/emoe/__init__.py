"""Turn dense transformer FFN layers into sparse mixture-of-experts
without adding parameters, and merge them back losslessly.

The key matrix of a feed-forward layer is clustered into balanced
groups of neurons; each group becomes an expert, and the mean of each
group's key vectors becomes that expert's gate column. Top-k gate
scores then pick which experts run. Everything is reversible: merging
the experts back reproduces the dense layer bit-for-bit.
"""

from .clustering import (
    ClusteringReport,
    Partition,
    balanced_kmeans,
    partition_objective,
    random_partition,
)
from .errors import ConstraintError, EmoeError, FormatError, ShapeError, TrainingError
from .ffn import FfnLayer, ffn_forward, neuron_view, pre_activations
from .moe import (
    EmoeLayer,
    Expert,
    GateMode,
    SelectionKind,
    SelectionPolicy,
    emoe_forward,
    gate_scores,
    merge,
    prune,
    select_experts,
    split,
)
from .numerics import ActivationKind, apply_activation, make_rng, matmul, topk_indices
from .stats import (
    ActivationRatios,
    FlopsReport,
    UsageHistogram,
    activation_ratios,
    export_heatmap,
    flops_report,
    usage_histogram,
)

__version__ = "0.1.0"

__all__ = [
    "ActivationKind",
    "ActivationRatios",
    "ClusteringReport",
    "ConstraintError",
    "EmoeError",
    "EmoeLayer",
    "Expert",
    "FfnLayer",
    "FlopsReport",
    "FormatError",
    "GateMode",
    "Partition",
    "SelectionKind",
    "SelectionPolicy",
    "ShapeError",
    "TrainingError",
    "UsageHistogram",
    "activation_ratios",
    "apply_activation",
    "balanced_kmeans",
    "emoe_forward",
    "export_heatmap",
    "ffn_forward",
    "flops_report",
    "gate_scores",
    "make_rng",
    "matmul",
    "merge",
    "neuron_view",
    "partition_objective",
    "pre_activations",
    "prune",
    "random_partition",
    "select_experts",
    "split",
    "topk_indices",
    "usage_histogram",
]
