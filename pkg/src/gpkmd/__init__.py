"""Gaussian process Koopman mode decomposition."""

__version__ = "0.1.0"

from .data import StuartLandauConfig, exact_sl_eigenvalues, eigenvalue_error, stuart_landau
from .initialization import DmdResult, dmd, initialize, pca_latents, to_continuous
from .kernels import KernelSpec, gram
from .model import (
    GpkmdParams,
    KoopmanSpectrum,
    PriorSpec,
    evaluate,
    log_likelihood_fast,
    log_likelihood_naive,
    log_posterior,
)
from .optimize import FitConfig, FitTrace, map_fit, map_fit_restarts

__all__ = [
    "DmdResult",
    "FitConfig",
    "FitTrace",
    "GpkmdParams",
    "KernelSpec",
    "KoopmanSpectrum",
    "PriorSpec",
    "StuartLandauConfig",
    "dmd",
    "eigenvalue_error",
    "evaluate",
    "exact_sl_eigenvalues",
    "gram",
    "initialize",
    "log_likelihood_fast",
    "log_likelihood_naive",
    "log_posterior",
    "map_fit",
    "map_fit_restarts",
    "pca_latents",
    "stuart_landau",
    "to_continuous",
]
