"""Posterior moments of two-group and mixed hierarchical linear models by
deterministic quadrature over the scale parameters."""

__version__ = "0.1.0"

from .errors import (
    BisectionFailure,
    DimensionMismatch,
    EigenFailure,
    GridTooCoarse,
    ImproperPosterior,
    InvalidInterval,
    MargquadError,
    MissingCovariance,
    NoConvergence,
    NonFinite,
    NonPositiveScale,
    NonPositiveVariance,
    RankDeficiencyWarning,
    SingularMatrix,
    ValidationError,
)
from .mixed import fit_mixed, reduce
from .model import ModelInput, PosteriorSummary, Standardization, standardize, validate
from .mrp import CellEstimates, PoststratTable, mrp_combine
from .oracle import brute_force_summary, gaussian_lemma_check, posterior_draws
from .pipeline import FitConfig, fit_model, load_config, read_csv, run_fit
from .quadrature import QuadratureConfig, integrate_rho, rho_peak
from .special import detect_structure, special_moments
from .twogroup import fit_two_group

__all__ = [
    "BisectionFailure",
    "CellEstimates",
    "DimensionMismatch",
    "EigenFailure",
    "FitConfig",
    "GridTooCoarse",
    "ImproperPosterior",
    "InvalidInterval",
    "MargquadError",
    "MissingCovariance",
    "ModelInput",
    "NoConvergence",
    "NonFinite",
    "NonPositiveScale",
    "NonPositiveVariance",
    "PosteriorSummary",
    "PoststratTable",
    "QuadratureConfig",
    "RankDeficiencyWarning",
    "SingularMatrix",
    "Standardization",
    "ValidationError",
    "brute_force_summary",
    "detect_structure",
    "fit_mixed",
    "fit_model",
    "fit_two_group",
    "gaussian_lemma_check",
    "integrate_rho",
    "load_config",
    "mrp_combine",
    "posterior_draws",
    "read_csv",
    "reduce",
    "rho_peak",
    "run_fit",
    "special_moments",
    "standardize",
    "validate",
]
