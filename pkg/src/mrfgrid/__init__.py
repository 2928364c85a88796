"""Markov random field smoothing of point and areal data on a fine grid."""

from .errors import DomainError, NumericError, SizeError
from .grid import ArealObs, GridSpec, PointObs, build_areal_mapping, build_point_mapping, cell_index
from .matern import MaternParams, gp_predict, gp_profile_fit, matern_corr
from .normal_fit import FitResult, Hyperparams, compute_ghat, maximize_lambda, pointwise_se
from .precision import PrecisionMatrix, build_precision

__version__ = "0.1.0"

__all__ = [
    "ArealObs", "DomainError", "FitResult", "GridSpec", "Hyperparams", "MaternParams",
    "NumericError", "PointObs", "PrecisionMatrix", "SizeError", "build_areal_mapping",
    "build_point_mapping", "build_precision", "cell_index", "compute_ghat", "gp_predict",
    "gp_profile_fit", "matern_corr", "maximize_lambda", "pointwise_se", "__version__",
]
