"""Nested error regression with heteroscedastic variance functions.

Moment estimation of (beta, gamma, tau2), EBLUP prediction of area means,
second-order MSE estimation and the Monte Carlo harness used to check them.
"""

from .errors import (
    ConstraintError,
    ConvergenceError,
    HnervfError,
    KurtosisUnidentifiedError,
    PreconditionError,
    RankError,
    RegistryError,
    ShapeError,
    SingularDesignError,
    SingularVarianceError,
    StudyFailureError,
)
from .estimation import (
    BiasTerms,
    FitOptions,
    FitResult,
    InfluenceSet,
    KurtosisEstimates,
    OmegaMatrix,
    bias_terms,
    estimate_kurtosis,
    estimate_tau2,
    fit,
    gls_beta,
    influence_and_omega,
    ols_fit,
    solve_gamma,
)
from .model import Cluster, ClusteredDataset, ClusterGeometry, Geometry, ModelParams, cluster_geometry
from .prediction import (
    MseReport,
    PredictionTarget,
    blup,
    dataset_aggregates,
    eblup,
    mse_cross_term,
    mse_estimate,
    mse_first_order,
    mse_report,
    mse_second_order,
    r1_bias_correction,
)
from .variance import VarianceFunction, eval_variance

__version__ = "0.1.0"
