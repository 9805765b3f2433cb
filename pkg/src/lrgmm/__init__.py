"""Locally robust semiparametric GMM toolkit.

Cross-fit moment estimation with influence-function adjustments, from
scratch first-step learners, numerically constructed adjustment terms,
a catalog of doubly robust estimators, and a dynamic discrete choice
Monte Carlo lab, behind a small CLI.
"""

from ._backend import BACKEND, ENV_FLAG
from .learners import (
    LearnerSpec,
    fit_conditional_density,
    fit_kernel_regression,
    fit_learner,
    fit_logit_lasso,
    fit_series_regression,
    fit_tree_ensemble,
    silverman_bandwidth,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ENV_FLAG",
    "LearnerSpec",
    "fit_conditional_density",
    "fit_kernel_regression",
    "fit_learner",
    "fit_logit_lasso",
    "fit_series_regression",
    "fit_tree_ensemble",
    "silverman_bandwidth",
    "__version__",
]
