"""Correspondence-guided reference inpainting on a toy latent diffusion model."""

from .domain import (
    NEG_INF,
    AttentionMap,
    AttentionMask,
    CorrespondenceField,
    GridShape,
    GuidanceConfig,
    LatentTensor,
    MatchingMap,
    Status,
)
from .toydiff import Mode, NumericError, ToyDenoiser, build_schedule, run_inpaint

__version__ = "0.1.0"

__all__ = [
    "NEG_INF",
    "AttentionMap",
    "AttentionMask",
    "CorrespondenceField",
    "GridShape",
    "GuidanceConfig",
    "LatentTensor",
    "MatchingMap",
    "Mode",
    "NumericError",
    "Status",
    "ToyDenoiser",
    "build_schedule",
    "run_inpaint",
]
