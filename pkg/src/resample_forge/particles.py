"""Particle sets, weight bookkeeping, and Gaussian kernel density estimation.

A ParticleSet is the currency every other module trades in: n positions
in d dimensions plus n normalized weights. Positions and weights are
stored as autodiff Tensors so that any computation built on them
(resampling weights, KDE log-densities, losses) is differentiable when
the inputs require gradients; plain-array callers never notice.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from io import StringIO

import numpy as np

from resample_forge import autodiff as ad
from resample_forge.autodiff import Tensor

_WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class KdeConfig:
    """Isotropic Gaussian kernel bandwidth, shared across dimensions."""

    bandwidth: float

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")


class ParticleSet:
    """n weighted samples in d dimensions."""

    def __init__(self, positions, weights, validate: bool = True):
        self.positions = ad.as_tensor(positions)
        self.weights = ad.as_tensor(weights)
        if self.positions.ndim != 2:
            raise ValueError(f"positions must be (n, d), got {self.positions.shape}")
        if self.weights.ndim != 1 or self.weights.shape[0] != self.positions.shape[0]:
            raise ValueError(
                f"weights shape {self.weights.shape} does not match "
                f"positions {self.positions.shape}"
            )
        if validate:
            w = self.weights.data
            if w.size < 1 or self.positions.shape[1] < 1:
                raise ValueError("particle set needs n >= 1 and d >= 1")
            if np.any(w < 0):
                raise ValueError("negative particle weight")
            total = float(w.sum())
            if abs(total - 1.0) > _WEIGHT_SUM_TOL:
                raise ValueError(f"weights sum to {total}, expected 1")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def positions_array(self) -> np.ndarray:
        return self.positions.data

    def weights_array(self) -> np.ndarray:
        return self.weights.data

    def __repr__(self):
        return f"ParticleSet(n={self.n}, d={self.d})"


def normalize_weights(raw: np.ndarray) -> np.ndarray:
    """Scale non-negative raw weights to sum to one.

    All-zero or negative input signals a degenerate measurement update
    and is a hard error rather than something to paper over.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ValueError("normalize_weights: negative weight")
    total = raw.sum()
    if total <= 0:
        raise ValueError("normalize_weights: all weights zero (degenerate update)")
    return raw / total


def effective_sample_size(weights: np.ndarray) -> float:
    """1 / sum(w^2): the degeneracy diagnostic, in [1, n] for normalized w."""
    w = np.asarray(weights, dtype=np.float64)
    return float(1.0 / np.sum(w * w))


def _log_normal_const(d: int, bandwidth: float) -> float:
    return -0.5 * d * math.log(2.0 * math.pi * bandwidth * bandwidth)


def kde_log_density(particles: ParticleSet, query, cfg: KdeConfig) -> Tensor:
    """log of the Gaussian-mixture density sum_i w_i N(query; x_i, h^2 I).

    Computed via log-sum-exp over the particle axis; differentiable with
    respect to positions and weights. Returns a scalar Tensor.
    """
    query = ad.as_tensor(query)
    diff = particles.positions - query
    sq = ad.sum_(diff * diff, axis=1)
    scores = sq * (-0.5 / (cfg.bandwidth * cfg.bandwidth))
    lse = ad.weighted_logsumexp(scores, particles.weights, axis=0)
    return lse + _log_normal_const(particles.d, cfg.bandwidth)


def kde_log_density_batch(positions: Tensor, weights: Tensor, queries: Tensor,
                          bandwidth: float) -> Tensor:
    """Batched KDE: positions (B, n, d), weights (B, n), queries (B, m, d)
    -> log densities (B, m)."""
    d = positions.shape[-1]
    pos = ad.reshape(positions, (positions.shape[0], 1, positions.shape[1], d))
    qry = ad.reshape(queries, (queries.shape[0], queries.shape[1], 1, d))
    diff = qry - pos
    sq = ad.sum_(diff * diff, axis=-1)                       # (B, m, n)
    scores = sq * (-0.5 / (bandwidth * bandwidth))
    w = ad.reshape(weights, (weights.shape[0], 1, weights.shape[1]))
    lse = ad.weighted_logsumexp(scores, w, axis=-1)          # (B, m)
    return lse + _log_normal_const(d, bandwidth)


def kde_log_density_many(particles: ParticleSet, queries: np.ndarray,
                         cfg: KdeConfig) -> np.ndarray:
    """Fast numpy-only KDE evaluation at many query points (no gradients).

    queries: (m, d) -> log densities (m,). Used for metrics and sanity
    integrals where m can be large.
    """
    pos = particles.positions.data
    w = particles.weights.data
    out = np.empty(len(queries))
    inv = -0.5 / (cfg.bandwidth * cfg.bandwidth)
    const = _log_normal_const(particles.d, cfg.bandwidth)
    chunk = 65536
    for start in range(0, len(queries), chunk):
        q = np.asarray(queries[start:start + chunk], dtype=np.float64)
        sq = ((q[:, None, :] - pos[None, :, :]) ** 2).sum(axis=-1) * inv
        masked = np.where(w[None, :] > 0, sq, -np.inf)
        shift = masked.max(axis=1, keepdims=True)
        out[start:start + chunk] = (
            np.log((w[None, :] * np.exp(sq - shift)).sum(axis=1))
            + shift[:, 0] + const
        )
    return out


# ---------------------------------------------------------------------------
# particle-set dataset files
# ---------------------------------------------------------------------------

_PSET_MAGIC = b"PSET1"


def save_particle_sets(path, sets: list[ParticleSet]) -> None:
    """PSET1 file: magic, u64 header (set count, n, d), then per set the
    n*d positions followed by n weights, all little-endian f64."""
    if not sets:
        raise ValueError("save_particle_sets: empty list")
    n, d = sets[0].n, sets[0].d
    for s in sets:
        if (s.n, s.d) != (n, d):
            raise ValueError("save_particle_sets: sets must share n and d")
    with open(path, "wb") as f:
        f.write(_PSET_MAGIC)
        f.write(struct.pack("<3Q", len(sets), n, d))
        for s in sets:
            f.write(s.positions.data.astype("<f8").tobytes())
            f.write(s.weights.data.astype("<f8").tobytes())


def load_particle_sets(path) -> list[ParticleSet]:
    with open(path, "rb") as f:
        magic = f.read(len(_PSET_MAGIC))
        if magic != _PSET_MAGIC:
            raise ValueError(f"{path}: not a particle-set file (bad magic {magic!r})")
        count, n, d = struct.unpack("<3Q", f.read(24))
        sets = []
        per_set = 8 * (n * d + n)
        for _ in range(count):
            buf = f.read(per_set)
            if len(buf) != per_set:
                raise ValueError(f"{path}: truncated particle-set file")
            positions = np.frombuffer(buf[: 8 * n * d], dtype="<f8").reshape(n, d)
            weights = np.frombuffer(buf[8 * n * d:], dtype="<f8")
            sets.append(ParticleSet(positions.astype(np.float64),
                                    weights.astype(np.float64)))
    return sets


def particle_set_to_csv(particles: ParticleSet) -> str:
    """CSV dump with columns dim_0..dim_{d-1}, weight, full precision."""
    buf = StringIO()
    cols = [f"dim_{j}" for j in range(particles.d)] + ["weight"]
    buf.write(",".join(cols) + "\n")
    pos = particles.positions.data
    w = particles.weights.data
    for i in range(particles.n):
        row = [repr(float(v)) for v in pos[i]] + [repr(float(w[i]))]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()
