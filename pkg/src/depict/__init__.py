"""DEPICT: a segmentation decoder whose layers are unrolled gradient steps on
coding-rate objectives, with the numerical tooling to check it."""

from .coding_rate import (
    RateConfig,
    coding_rate,
    coding_rate_dual,
    coding_rate_primal,
    per_basis_rate,
    projected_coding_rate,
    projected_rate_gradient,
)
from .decoder import DecoderConfig, DecoderParams, forward, init_params, predict_labels
from .errors import DepictError

__version__ = "0.1.0"

__all__ = [
    "RateConfig",
    "coding_rate",
    "coding_rate_dual",
    "coding_rate_primal",
    "per_basis_rate",
    "projected_coding_rate",
    "projected_rate_gradient",
    "DecoderConfig",
    "DecoderParams",
    "forward",
    "init_params",
    "predict_labels",
    "DepictError",
]
