"""blockfit: mixture models (stochastic block models) for valued graphs.

Fits latent-group structure to weighted networks by variational EM,
selects the number of groups with an ICL criterion, supports per-edge
covariates through regression-family edge distributions, and ships a
seeded simulation harness plus a small CLI (``blockfit``).
"""

from .engine import (
    FitResult,
    MixtureParams,
    VariationalPosterior,
    classification_entropy,
    complete_data_loglik,
    estep_fixed_point,
    exact_loglik,
    exact_posterior_marginals,
    fit,
    init_partition,
    lower_bound,
    mstep,
    relabel_descending,
)
from .errors import (
    BlockfitError,
    FamilyError,
    GraphBuildError,
    InputFormatError,
    NumericalError,
    SingularBlockError,
)
from .families import (
    FamilySpec,
    expfam_mle,
    log_density,
    param_count,
    poisson_pm_mle,
    poisson_regression_mle,
    weighted_mle,
)
from .graph import EdgeCovariates, ValuedGraph, attach_covariates, build_graph
from .predict import (
    PredictionReport,
    prediction_report,
    predict_degrees,
    predict_edges,
    r_squared,
)
from .selection import SelectionResult, icl, icl_penalty, map_assignment, select_q
from .simulate import (
    ExperimentReport,
    GridConfig,
    grid_params,
    rmse,
    run_experiment,
    sample_graph,
)

__version__ = "0.1.0"

__all__ = [
    "BlockfitError",
    "EdgeCovariates",
    "ExperimentReport",
    "FamilyError",
    "FamilySpec",
    "FitResult",
    "GraphBuildError",
    "GridConfig",
    "InputFormatError",
    "MixtureParams",
    "NumericalError",
    "PredictionReport",
    "SelectionResult",
    "SingularBlockError",
    "ValuedGraph",
    "VariationalPosterior",
    "attach_covariates",
    "build_graph",
    "classification_entropy",
    "complete_data_loglik",
    "estep_fixed_point",
    "exact_loglik",
    "exact_posterior_marginals",
    "expfam_mle",
    "fit",
    "grid_params",
    "icl",
    "icl_penalty",
    "init_partition",
    "log_density",
    "lower_bound",
    "map_assignment",
    "mstep",
    "param_count",
    "poisson_pm_mle",
    "poisson_regression_mle",
    "prediction_report",
    "predict_degrees",
    "predict_edges",
    "r_squared",
    "relabel_descending",
    "rmse",
    "run_experiment",
    "sample_graph",
    "select_q",
    "weighted_mle",
]
