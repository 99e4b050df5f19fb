"""Synthetic particle-set benchmark.

Each case draws a pair of random Gaussian mixtures over 5-D space: one
generates particle positions, the other assigns their weights (its
density evaluated at each position). Resamplers are then compared by the
KDE cross-entropy loss between their output and a target set drawn the
same way, swept over kernel bandwidths.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from resample_forge import autodiff as ad
from resample_forge.autodiff import Tensor
from resample_forge.loss import resampling_loss_batch
from resample_forge.parallel import parallel_map
from resample_forge.particles import (
    ParticleSet,
    load_particle_sets,
    save_particle_sets,
)
from resample_forge.resamplers import ResamplerKind, resample
from resample_forge.rng import RngStream

DIMS = 5
COMPONENTS = 3
PARTICLES_PER_SET = 32
MEAN_RANGE = (-5.0, 5.0)
STD_RANGE = (1.0, 3.0)
MIX_RANGE = (0.2, 0.4)


@dataclass(frozen=True)
class MixtureSpec:
    """Diagonal-covariance Gaussian mixture: means (3, 5), stds (3, 5),
    component probabilities (3,)."""

    means: np.ndarray
    stds: np.ndarray
    probs: np.ndarray

    def sample(self, rng: RngStream, count: int) -> np.ndarray:
        comp = rng.choice(COMPONENTS, size=count, p=self.probs)
        eps = rng.normal(size=(count, DIMS))
        return self.means[comp] + eps * self.stds[comp]

    def log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        z = (x[:, None, :] - self.means[None]) / self.stds[None]
        comp_log = (
            -0.5 * np.sum(z * z, axis=-1)
            - np.sum(np.log(self.stds), axis=-1)
            - 0.5 * DIMS * np.log(2 * np.pi)
            + np.log(self.probs)[None]
        )
        shift = comp_log.max(axis=1, keepdims=True)
        return np.log(np.exp(comp_log - shift).sum(axis=1)) + shift[:, 0]


@dataclass
class BenchmarkCase:
    sampling: MixtureSpec
    weighting: MixtureSpec
    inputs: ParticleSet
    targets: ParticleSet


def generate_mixture(rng: RngStream) -> MixtureSpec:
    means = rng.uniform(*MEAN_RANGE, (COMPONENTS, DIMS))
    stds = rng.uniform(*STD_RANGE, (COMPONENTS, DIMS))
    p12 = rng.uniform(*MIX_RANGE, 2)
    probs = np.array([p12[0], p12[1], 1.0 - p12.sum()])
    return MixtureSpec(means, stds, probs)


def _weighted_draw(sampling: MixtureSpec, weighting: MixtureSpec,
                   rng: RngStream, n: int) -> ParticleSet:
    positions = sampling.sample(rng, n)
    log_w = weighting.log_density(positions)
    raw = np.exp(log_w - log_w.max())
    return ParticleSet(positions, raw / raw.sum())


def generate_case(rng: RngStream, n: int = PARTICLES_PER_SET,
                  reuse_inputs_as_targets: bool = False) -> BenchmarkCase:
    """One benchmark case: input and target sets share the mixture pair;
    by default the target set is a fresh draw, optionally the input set
    itself is reused."""
    sampling = generate_mixture(rng.split(0))
    weighting = generate_mixture(rng.split(1))
    inputs = _weighted_draw(sampling, weighting, rng.split(2), n)
    if reuse_inputs_as_targets:
        targets = inputs
    else:
        targets = _weighted_draw(sampling, weighting, rng.split(3), n)
    return BenchmarkCase(sampling, weighting, inputs, targets)


def generate_dataset(count: int, split: tuple[int, int], rng: RngStream,
                     out_dir, n: int = PARTICLES_PER_SET,
                     reuse_inputs_as_targets: bool = False) -> dict[str, str]:
    """Write train/eval input+target PSET1 files; each case's stream is
    keyed by its index, so the files are byte-identical for a given seed
    regardless of generation order."""
    train_count, eval_count = split
    if train_count + eval_count != count:
        raise ValueError(f"split {split} does not sum to count {count}")
    if count < 1:
        raise ValueError("count must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    cases = [generate_case(rng.split(i), n, reuse_inputs_as_targets)
             for i in range(count)]
    paths = {}
    blocks = {"train": cases[:train_count], "eval": cases[train_count:]}
    for name, block in blocks.items():
        if not block:
            continue
        inputs_path = os.path.join(out_dir, f"{name}_inputs.pset")
        targets_path = os.path.join(out_dir, f"{name}_targets.pset")
        save_particle_sets(inputs_path, [c.inputs for c in block])
        save_particle_sets(targets_path, [c.targets for c in block])
        paths[f"{name}_inputs"] = inputs_path
        paths[f"{name}_targets"] = targets_path
    return paths


def load_dataset_pair(inputs_path, targets_path) -> tuple[list[ParticleSet],
                                                          list[ParticleSet]]:
    inputs = load_particle_sets(inputs_path)
    targets = load_particle_sets(targets_path)
    if len(inputs) != len(targets):
        raise ValueError(
            f"dataset mismatch: {len(inputs)} input sets vs {len(targets)} targets"
        )
    return inputs, targets


def _batched_loss(out_sets: list[ParticleSet], target_sets: list[ParticleSet],
                  bandwidth: float, chunk: int = 256) -> np.ndarray:
    losses = np.empty(len(out_sets))
    with ad.no_grad():
        for start in range(0, len(out_sets), chunk):
            o = out_sets[start:start + chunk]
            t = target_sets[start:start + chunk]
            batch = resampling_loss_batch(
                Tensor(np.stack([s.positions.data for s in o])),
                Tensor(np.stack([s.weights.data for s in o])),
                np.stack([s.positions.data for s in t]),
                np.stack([s.weights.data for s in t]),
                bandwidth,
            )
            losses[start:start + chunk] = batch.data
    return losses


def bandwidth_sweep(kind: ResamplerKind, inputs: list[ParticleSet],
                    targets: list[ParticleSet], bandwidths: list[float],
                    rng: RngStream, transformer_params=None) -> list[dict]:
    """Mean loss per bandwidth over all cases; one record per bandwidth."""
    if not bandwidths or any(h <= 0 for h in bandwidths):
        raise ValueError("bandwidths must be a non-empty list of positive reals")

    def _resample_case(item):
        i, s = item
        with ad.no_grad():
            return resample(kind, s, rng.split(i),
                            transformer_params=transformer_params)

    outputs = parallel_map(_resample_case, enumerate(inputs))
    records = []
    for h in bandwidths:
        losses = _batched_loss(outputs, targets, h)
        records.append({
            "resampler": kind.tag,
            "bandwidth": h,
            "mean_loss": float(losses.mean()),
            "stderr": float(losses.std(ddof=1) / np.sqrt(len(losses)))
            if len(losses) > 1 else 0.0,
            "n_cases": len(losses),
        })
    return records
