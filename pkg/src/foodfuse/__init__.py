"""Desk-scale latent diffusion for food image composition."""

from .diffusion import SamplerConfig, build_schedule, cfg_combine, ddim_step, sample
from .model import CompositionModel, ModelConfig
from .numerics import NumericalError, RngStream, ShapeError

__all__ = [
    "CompositionModel",
    "ModelConfig",
    "NumericalError",
    "RngStream",
    "SamplerConfig",
    "ShapeError",
    "build_schedule",
    "cfg_combine",
    "ddim_step",
    "sample",
]
__version__ = "0.1.0"
