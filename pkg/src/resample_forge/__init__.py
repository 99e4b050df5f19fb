"""Particle filter toolkit with classic and learned resamplers."""

from resample_forge.autodiff import Tensor, backward, no_grad
from resample_forge.particles import KdeConfig, ParticleSet
from resample_forge.resamplers import ResamplerKind
from resample_forge.rng import RngStream

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "ParticleSet",
    "KdeConfig",
    "ResamplerKind",
    "RngStream",
]
