"""Treated-effect estimation with a negative-control outcome proxy.

The package provides parametric GMM estimators, a cross-fitted kernel
minimax estimator with influence-function inference, diagnostics, baseline
comparators and synthetic data generators, plus a CLI (``coca``).
"""

__version__ = "0.1.0"

from .baselines import (
    CocaOls,
    CocaOlsFit,
    DidEstimator,
    DidResult,
    coca_grid_search,
    coca_ols_oneshot,
    did_estimate,
)
from .crossfit import (
    CrossFitResult,
    MedianAdjusted,
    MinimaxNuisanceFitter,
    SemiparametricCoca,
    crossfit_estimate,
    influence_values,
    median_adjust,
    multiplier_bootstrap,
    plugin_psi0_bridge,
    plugin_psi0_eps,
)
from .data import Dataset, FoldPartition, split_folds, validate_dataset
from .dgp import (
    DgpSpec,
    TrueDgpFunctions,
    binary_bridge_closed_form,
    brute_force_bridge_discrete,
    gen_binary_discrete,
    gen_gaussian,
    gen_rank_preserving,
    generate,
    result1_identity_check,
)
from .diagnostics import (
    OveridResult,
    SensitivityCurve,
    overid_test,
    sensitivity_curve,
)
from .gmm import (
    BasisSpec,
    GmmFit,
    MomentSpec,
    cv_select_lambda,
    default_basis,
    empty_odds_basis,
    fit_gmm,
    gmm_psi_influence,
    gmm_variance,
    moment_dr,
    moment_or,
    moment_ps,
    parametric_odds,
)
from .kernels import (
    ColumnStandardizer,
    GaussianKernelParams,
    gram_matrix,
    kernel_eval,
    median_heuristic_bandwidth,
    regularized_pinv_solve,
)
from .minimax import (
    BridgeFunction,
    KernelFunctionEstimate,
    MinimaxProblem,
    OddsFunction,
    cv_select_hyperparams,
    fit_bridge,
    fit_odds_weight,
    fit_odds_with_ratio_remedy,
    projected_risk,
    select_default_hyperparams,
    solve_minimax,
    v_statistic_risk,
)

__all__ = [name for name in dir() if not name.startswith("_")]
