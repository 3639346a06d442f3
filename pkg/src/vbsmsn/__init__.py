"""Von Bertalanffy growth curves with scale-mixture skew-normal errors."""

from .dataio import DataError, generate_synthetic, load_csv, save_csv
from .estimation import FitConfig, FitError, FitResult, ProfileResult, aic, confidence_band, fit, profile_nu
from .influence import filter_and_refit, influence_analysis, likelihood_displacement, relative_change
from .model import Family, GrowthDataset, ModelSpec, ThetaVB, loglik, loglik_grad, vb_mean
from .protocol import RunConfig, run_protocol

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "Family",
    "FitConfig",
    "FitError",
    "FitResult",
    "GrowthDataset",
    "ModelSpec",
    "ProfileResult",
    "RunConfig",
    "ThetaVB",
    "aic",
    "confidence_band",
    "filter_and_refit",
    "fit",
    "generate_synthetic",
    "influence_analysis",
    "likelihood_displacement",
    "load_csv",
    "loglik",
    "loglik_grad",
    "profile_nu",
    "relative_change",
    "run_protocol",
    "save_csv",
    "vb_mean",
]
