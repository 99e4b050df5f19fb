"""Classic resampling schemes behind one dispatchable interface.

Multinomial and systematic resampling copy input particles and reset
weights to uniform. Soft resampling samples from a weight/uniform
mixture and importance-corrects the output weights through the autodiff
engine, so they carry gradients back to the input weights. The learned
resampler plugs into the same dispatch under the "transformer" tag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from resample_forge import autodiff as ad
from resample_forge.autodiff import Tensor
from resample_forge.particles import ParticleSet
from resample_forge.rng import RngStream

RESAMPLER_TAGS = ("multinomial", "systematic", "soft", "transformer", "none")


@dataclass(frozen=True)
class ResamplerKind:
    """Which resampler to run; alpha is the soft-resampling mixture weight."""

    tag: str
    alpha: float = 0.5

    def __post_init__(self):
        if self.tag not in RESAMPLER_TAGS:
            raise ValueError(f"unknown resampler {self.tag!r}, expected one of {RESAMPLER_TAGS}")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"soft-resampling alpha must be in (0, 1], got {self.alpha}")


def _uniform_weights(n: int) -> Tensor:
    return Tensor(np.full(n, 1.0 / n))


def multinomial_resample(particles: ParticleSet, rng: RngStream) -> ParticleSet:
    """Draw n ancestors i.i.d. with replacement, proportional to weight."""
    n = particles.n
    idx = rng.choice(n, size=n, p=particles.weights.data)
    positions = ad.gather_rows(particles.positions, idx)
    return ParticleSet(positions, _uniform_weights(n))


def systematic_ancestors(weights: np.ndarray, offset: float) -> np.ndarray:
    """Ancestor indices for grid points offset + k/n over the cumulative
    weight distribution. A grid point landing exactly on a boundary
    resolves to the lower index."""
    n = len(weights)
    grid = offset + np.arange(n) / n
    cumulative = np.cumsum(weights)
    idx = np.searchsorted(cumulative, grid, side="left")
    return np.minimum(idx, n - 1)


def systematic_resample(particles: ParticleSet, rng: RngStream) -> ParticleSet:
    """One uniform offset in [0, 1/n) plus an evenly spaced grid; every
    particle with weight > c/n is selected at least c times."""
    n = particles.n
    offset = float(rng.uniform(0.0, 1.0 / n))
    idx = systematic_ancestors(particles.weights.data, offset)
    positions = ad.gather_rows(particles.positions, idx)
    return ParticleSet(positions, _uniform_weights(n))


def soft_resample(particles: ParticleSet, alpha: float, rng: RngStream) -> ParticleSet:
    """Multinomial draw from q = alpha*w + (1-alpha)/n, with output weight
    of ancestor i proportional to w_i / q_i (then normalized).

    The weight arithmetic runs through the autodiff engine: output
    weights are differentiable w.r.t. input weights for the sampled
    ancestors, and output positions carry position gradients as copies.
    """
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"soft_resample: alpha must be in (0, 1], got {alpha}")
    n = particles.n
    q = particles.weights * alpha + (1.0 - alpha) / n
    q_data = q.data / q.data.sum()  # re-normalize rounding before sampling
    idx = rng.choice(n, size=n, p=q_data)
    positions = ad.gather_rows(particles.positions, idx)
    raw = ad.gather_rows(particles.weights, idx) / ad.gather_rows(q, idx)
    weights = raw / ad.sum_(raw)
    return ParticleSet(positions, weights)


def resample(kind: ResamplerKind, particles: ParticleSet, rng: RngStream,
             transformer_params=None) -> ParticleSet:
    """Dispatch on resampler kind; "none" passes the set through."""
    if kind.tag == "none":
        return particles
    if kind.tag == "multinomial":
        return multinomial_resample(particles, rng)
    if kind.tag == "systematic":
        return systematic_resample(particles, rng)
    if kind.tag == "soft":
        return soft_resample(particles, kind.alpha, rng)
    if kind.tag == "transformer":
        if transformer_params is None:
            raise ValueError("transformer resampler selected but no parameters loaded")
        from resample_forge.transformer import transformer_resample

        return transformer_resample(particles, transformer_params)
    raise ValueError(f"unknown resampler {kind.tag!r}")
