"""Structured Uncertainty Similarity Score (SUSS).

A reference image is decomposed into luminance at three scales plus
quarter-scale chroma; a sparse-precision Gaussian is fitted around each
component, and a candidate is scored by its weighted log-likelihood.
"""

__version__ = "0.1.0"

from .imaging import COMPONENTS, decompose, load_image, save_image  # noqa: E402
from .score import ComponentWeights, ScoreBreakdown, suss, suss_map, suss_symmetric  # noqa: E402
from .fitting import FitConfig, fit_decomposition  # noqa: E402

__all__ = [
    "COMPONENTS",
    "ComponentWeights",
    "FitConfig",
    "ScoreBreakdown",
    "decompose",
    "fit_decomposition",
    "load_image",
    "save_image",
    "suss",
    "suss_map",
    "suss_symmetric",
]
