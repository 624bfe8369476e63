"""Misspecification-efficient GMM: estimators, variance bounds, recentered bootstraps."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402
from .model import DataSet, ExponentialIV, LinearIV, MomentModel  # noqa: E402
from .estimate import EstimationError, GmmFit, WeightSpec, fit_gmm, solve_gmm  # noqa: E402
from .me import Recentering, oracle_me  # noqa: E402

__all__ = [
    "BACKEND", "DataSet", "ExponentialIV", "LinearIV", "MomentModel", "EstimationError",
    "GmmFit", "WeightSpec", "fit_gmm", "solve_gmm", "Recentering", "oracle_me",
]
