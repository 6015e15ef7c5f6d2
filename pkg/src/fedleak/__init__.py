"""Federated-learning laboratory.

Simulates FedAvg with ideal secure aggregation over first-layer-fully-
connected ReLU models, runs an update-disaggregation attack that recovers
training samples and regroups them per client, evaluates client-side
censoring defenses, and verifies the attack-enabling identities against a
ground-truth oracle.
"""

from .attack import (
    GroupingGraph,
    ReconstructedActivation,
    RecoveredSet,
    build_grouping_graph,
    kmeans_baseline,
    omp_reconstruct,
    recover_samples,
    run_attack,
)
from .data import (
    DataPrior,
    Dataset,
    LabeledExample,
    Partition,
    SyntheticSpec,
    generate_synthetic,
    load_idx_images,
    partition_dirichlet,
    partition_iid,
)
from .defense import DefenseConfig, censor_beta, censor_q
from .federated import (
    OracleLog,
    TrainingConfig,
    TrainingTrace,
    local_update,
    run_grid,
    run_training,
    secure_aggregate,
)
from .metrics import AttackReportMetrics, compute_ratios, evaluate_attack, v_measure
from .model import FirstLayerGradient, ModelParams, first_layer_gradients, forward, loss
from .trace_io import load_trace, save_trace

__version__ = "0.1.0"

__all__ = [
    "AttackReportMetrics",
    "DataPrior",
    "Dataset",
    "DefenseConfig",
    "FirstLayerGradient",
    "GroupingGraph",
    "LabeledExample",
    "ModelParams",
    "OracleLog",
    "Partition",
    "ReconstructedActivation",
    "RecoveredSet",
    "SyntheticSpec",
    "TrainingConfig",
    "TrainingTrace",
    "build_grouping_graph",
    "censor_beta",
    "censor_q",
    "compute_ratios",
    "evaluate_attack",
    "first_layer_gradients",
    "forward",
    "generate_synthetic",
    "kmeans_baseline",
    "load_idx_images",
    "load_trace",
    "local_update",
    "loss",
    "omp_reconstruct",
    "partition_dirichlet",
    "partition_iid",
    "recover_samples",
    "run_attack",
    "run_grid",
    "run_training",
    "save_trace",
    "secure_aggregate",
    "v_measure",
]
