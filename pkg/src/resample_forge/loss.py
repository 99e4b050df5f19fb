"""Likelihood loss between a resampled set and a target set.

The resampled particles are smoothed into a Gaussian mixture by KDE; the
loss is the negative log-likelihood of the target particles under that
mixture, each target weighted by its normalized weight:

    L = - sum_i (v_i / sum_j v_j) * log q(y_i)

Minimizing it minimizes the cross-entropy from the target particle
measure to the KDE of the output set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from resample_forge import autodiff as ad
from resample_forge.autodiff import Tensor
from resample_forge.particles import (
    KdeConfig,
    ParticleSet,
    kde_log_density_batch,
)
from resample_forge.resamplers import ResamplerKind, resample
from resample_forge.rng import RngStream


@dataclass(frozen=True)
class TargetStrategy:
    """How training targets are built from an input set: the input
    particles themselves, or a classical resampler's output on them."""

    tag: str  # "identity" | "traditional"
    resampler: ResamplerKind | None = None

    def __post_init__(self):
        if self.tag not in ("identity", "traditional"):
            raise ValueError(f"unknown target strategy {self.tag!r}")
        if self.tag == "traditional":
            if self.resampler is None or self.resampler.tag not in (
                "multinomial",
                "systematic",
            ):
                raise ValueError(
                    "traditional targets need a multinomial or systematic resampler"
                )


def build_targets(particles: ParticleSet, strategy: TargetStrategy,
                  rng: RngStream) -> ParticleSet:
    if strategy.tag == "identity":
        return particles
    return resample(strategy.resampler, particles, rng)


def resampling_loss(output: ParticleSet, targets: ParticleSet,
                    cfg: KdeConfig) -> Tensor:
    """Scalar loss; differentiable w.r.t. output positions and weights."""
    if output.d != targets.d:
        raise ValueError(f"dimension mismatch: output d={output.d}, targets d={targets.d}")
    pos = ad.reshape(output.positions, (1,) + output.positions.shape)
    w = ad.reshape(output.weights, (1, output.n))
    queries = ad.reshape(targets.positions, (1,) + targets.positions.shape)
    log_q = kde_log_density_batch(pos, w, queries, cfg.bandwidth)  # (1, m)
    v_hat = Tensor(targets.weights.data / targets.weights.data.sum())
    return -ad.sum_(ad.reshape(log_q, (targets.n,)) * v_hat)


def resampling_loss_batch(out_positions: Tensor, out_weights: Tensor,
                          target_positions: np.ndarray,
                          target_weights: np.ndarray,
                          bandwidth: float) -> Tensor:
    """Per-case losses (B,) for out_positions (B, n, d), out_weights
    (B, n) against constant target arrays (B, m, d) and (B, m)."""
    log_q = kde_log_density_batch(out_positions, out_weights,
                                  ad.as_tensor(target_positions), bandwidth)
    v = np.asarray(target_weights, dtype=np.float64)
    v_hat = Tensor(v / v.sum(axis=1, keepdims=True))
    return -ad.sum_(log_q * v_hat, axis=1)
