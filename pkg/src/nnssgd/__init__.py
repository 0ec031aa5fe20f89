"""Nuclear-norm-regularized matrix optimization by low-rank stochastic
subgradient descent, with a complete matrix-completion application."""

from .completion import (
    CompletionConfig,
    CompletionModel,
    DerivedParams,
    MetricsRecord,
    init_params,
    load_model,
    predict,
    preprocess_center,
    rmse,
    save_model,
    train,
)
from .data import IdMap, SparseObservations, gen_synthetic, load_ratings, save_ratings
from .errors import (
    DataError,
    FormatError,
    InvalidArgumentError,
    NumericalFailureError,
)
from .linalg import CompactSVD, reduced_qr, small_svd, truncate_svd, tsvd_sparse
from .losses import (
    AbsoluteLoss,
    SmoothedHingeLoss,
    SquaredLoss,
    SumLoss,
    make_loss,
)
from .probing import (
    ProbeMatrix,
    apply_probe_right,
    expected_second_moment_ratio,
    make_rng,
    probe_step_factors,
    sample_probe,
)
from .solver import (
    SolverState,
    fixed_horizon_step_size,
    incremental_update,
    nuclear_subgradient_factors,
    objective,
    project_fro_ball,
    prox_gradient_solve,
    ssgd_minimize,
    subgradient_probe,
)

__version__ = "0.1.0"

__all__ = [
    "AbsoluteLoss",
    "CompactSVD",
    "CompletionConfig",
    "CompletionModel",
    "DataError",
    "DerivedParams",
    "FormatError",
    "IdMap",
    "InvalidArgumentError",
    "MetricsRecord",
    "NumericalFailureError",
    "ProbeMatrix",
    "SmoothedHingeLoss",
    "SolverState",
    "SparseObservations",
    "SquaredLoss",
    "SumLoss",
    "apply_probe_right",
    "expected_second_moment_ratio",
    "fixed_horizon_step_size",
    "gen_synthetic",
    "incremental_update",
    "init_params",
    "load_model",
    "load_ratings",
    "make_loss",
    "make_rng",
    "nuclear_subgradient_factors",
    "objective",
    "predict",
    "preprocess_center",
    "probe_step_factors",
    "project_fro_ball",
    "prox_gradient_solve",
    "reduced_qr",
    "rmse",
    "sample_probe",
    "save_model",
    "save_ratings",
    "small_svd",
    "ssgd_minimize",
    "subgradient_probe",
    "train",
    "truncate_svd",
    "tsvd_sparse",
]
