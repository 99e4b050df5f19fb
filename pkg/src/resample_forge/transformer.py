"""Learned resampler: a permutation-invariant, scale-equivariant
encoder/decoder over weighted particle sets.

The attention primitive generalizes scaled dot-product attention by
multiplying each key's softmax term by its particle weight:

    out = sum_i w_i exp(q.k_i / sqrt(d_k)) v_i / sum_j w_j exp(q.k_j / sqrt(d_k))

The encoder embeds min-max-normalized particle positions and applies
weighted multi-head self-attention twice; the decoder grows n output
particles from n learned seed vectors via self-attention over the seeds
and weighted cross-attention into the encoded set. Outputs are mapped
back to the original coordinate ranges and always carry uniform weights.

Inputs are sorted into a canonical order before encoding. The network is
mathematically order-free, but float summation is not associative, so
the sort is what makes permutation invariance bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from resample_forge import autodiff as ad
from resample_forge.autodiff import Tensor
from resample_forge.particles import ParticleSet
from resample_forge.rng import RngStream


@dataclass
class ScaleContext:
    """Per-dimension input extents retained for the inverse map.

    mn/mx/span/safe_span have shape (B, 1, d); span is zero on degenerate
    dimensions while safe_span substitutes 1 there to keep the forward
    map finite.
    """

    mn: Tensor
    mx: Tensor
    span: Tensor
    safe_span: Tensor


def scale_to_unit_batch(positions: Tensor) -> tuple[Tensor, ScaleContext]:
    """Affinely map each dimension of (B, n, d) positions to [-1, 1].

    A degenerate dimension (min == max) maps to 0 everywhere; the
    context still lets rescale restore the constant exactly.
    """
    mn = ad.min_(positions, axis=1, keepdims=True)
    mx = ad.max_(positions, axis=1, keepdims=True)
    span = mx - mn
    safe_span = span + Tensor((span.data == 0.0).astype(np.float64))
    scaled = (positions * 2.0 - (mn + mx)) / safe_span
    return scaled, ScaleContext(mn, mx, span, safe_span)


def rescale_from_unit_batch(positions: Tensor, ctx: ScaleContext) -> Tensor:
    """Inverse of scale_to_unit_batch; values outside [-1, 1] extrapolate
    linearly, and degenerate dimensions come back as their constant."""
    return (positions * ctx.span + (ctx.mn + ctx.mx)) * 0.5


def scale_to_unit(particles: ParticleSet) -> tuple[Tensor, ScaleContext]:
    """Single-set variant: (n, d) positions -> ((n, d) scaled, context)."""
    pos = ad.reshape(particles.positions, (1,) + particles.positions.shape)
    scaled, ctx = scale_to_unit_batch(pos)
    return ad.reshape(scaled, particles.positions.shape), ctx


def rescale_from_unit(positions: Tensor, ctx: ScaleContext) -> Tensor:
    positions = ad.as_tensor(positions)
    pos = ad.reshape(positions, (1,) + positions.shape)
    return ad.reshape(rescale_from_unit_batch(pos, ctx), positions.shape)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def _support_max(scores: np.ndarray, w: np.ndarray | None, m_axis: int = -1) -> np.ndarray:
    """Max score per query restricted to keys with positive weight; used
    as a detached stabilization shift (its true gradient is zero)."""
    if w is None:
        return scores.max(axis=m_axis, keepdims=True)
    wb = np.broadcast_to(w, scores.shape)
    masked = np.where(wb > 0.0, scores, -np.inf)
    shift = masked.max(axis=m_axis, keepdims=True)
    if not np.all(np.isfinite(shift)):
        raise ValueError("weighted attention: all key weights are zero")
    return shift


def weighted_attention(q, K, V, w) -> Tensor:
    """Single-query weighted attention: q (d_k,), K (m, d_k), V (m, d_v),
    w (m,) -> (d_v,). Differentiable in every input including w."""
    q, K, V, w = map(ad.as_tensor, (q, K, V, w))
    d_k = q.shape[0]
    scores = ad.reshape(ad.matmul(K, ad.reshape(q, (d_k, 1))), (K.shape[0],))
    scores = scores * (1.0 / math.sqrt(d_k))
    shift = Tensor(_support_max(scores.data, w.data))
    e = ad.exp(scores - shift)
    ew = e * w
    num = ad.sum_(ad.reshape(ew, (K.shape[0], 1)) * V, axis=0)
    return num / ad.sum_(ew)


def _attend(scores: Tensor, V: Tensor, w: Tensor | None) -> Tensor:
    """Combine (B, h, n_q, m) scores with (B, h, m, d_v) values, with
    optional per-key weights (B, m)."""
    if w is None:
        return ad.matmul(ad.softmax(scores, axis=-1), V)
    w_data = w.data.reshape(w.shape[0], 1, 1, w.shape[1])
    shift = Tensor(_support_max(scores.data, w_data))
    e = ad.exp(scores - shift)
    ew = e * ad.reshape(w, (w.shape[0], 1, 1, w.shape[1]))
    return ad.matmul(ew, V) / ad.sum_(ew, axis=-1, keepdims=True)


class TransformerParams:
    """All learned tensors of the resampler plus its hyperparameters."""

    def __init__(self, n: int, d: int, latent: int = 256, heads: int = 8,
                 ff: int | None = None, enc_blocks: int = 2, dec_blocks: int = 2,
                 tensors: dict[str, Tensor] | None = None):
        if latent % heads != 0:
            raise ValueError(f"latent {latent} not divisible by heads {heads}")
        self.n = n
        self.d = d
        self.latent = latent
        self.heads = heads
        self.ff = latent if ff is None else ff
        self.enc_blocks = enc_blocks
        self.dec_blocks = dec_blocks
        self.tensors = tensors if tensors is not None else {}

    # -- construction --

    @classmethod
    def create(cls, n: int, d: int, rng: RngStream, latent: int = 256,
               heads: int = 8, ff: int | None = None,
               enc_blocks: int = 2, dec_blocks: int = 2) -> "TransformerParams":
        """Fresh parameters: fan-in-scaled Gaussian projections, zero
        biases, unit layer-norm gains, seed vectors from N(0, 0.02^2)."""
        params = cls(n, d, latent, heads, ff, enc_blocks, dec_blocks)
        L, F = params.latent, params.ff

        def dense(name, fan_in, fan_out):
            params.tensors[f"{name}.w"] = Tensor(
                rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)),
                requires_grad=True,
            )
            params.tensors[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)

        def norm(name):
            params.tensors[f"{name}.g"] = Tensor(np.ones(L), requires_grad=True)
            params.tensors[f"{name}.b"] = Tensor(np.zeros(L), requires_grad=True)

        def attention(name):
            for proj in ("wq", "wk", "wv", "wo"):
                dense(f"{name}.{proj}", L, L)

        dense("in_proj", d, L)
        for i in range(enc_blocks):
            attention(f"enc{i}.attn")
            norm(f"enc{i}.ln1")
            dense(f"enc{i}.ff.l1", L, F)
            dense(f"enc{i}.ff.l2", F, L)
            norm(f"enc{i}.ln2")
        params.tensors["seeds"] = Tensor(rng.normal(0.0, 0.02, (n, L)),
                                         requires_grad=True)
        for i in range(dec_blocks):
            attention(f"dec{i}.self")
            norm(f"dec{i}.ln1")
            attention(f"dec{i}.cross")
            norm(f"dec{i}.ln2")
            dense(f"dec{i}.ff.l1", L, F)
            dense(f"dec{i}.ff.l2", F, L)
            norm(f"dec{i}.ln3")
        dense("out_proj", L, d)
        return params

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def copy(self) -> "TransformerParams":
        tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                   for k, v in self.tensors.items()}
        return TransformerParams(self.n, self.d, self.latent, self.heads,
                                 self.ff, self.enc_blocks, self.dec_blocks, tensors)

    # -- persistence: binary checkpoint plus a sidecar config that makes
    # the checkpoint self-describing --

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.tensors)
        sidecar = {
            "n": self.n, "d": self.d, "latent": self.latent, "heads": self.heads,
            "ff": self.ff, "enc_blocks": self.enc_blocks, "dec_blocks": self.dec_blocks,
        }
        with open(f"{path}.json", "w") as f:
            json.dump(sidecar, f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "TransformerParams":
        with open(f"{path}.json") as f:
            hyper = json.load(f)
        arrays = ad.load_checkpoint(path)
        tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(tensors=tensors, **hyper)


def _dense(params: TransformerParams, name: str, x: Tensor) -> Tensor:
    return ad.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def _norm(params: TransformerParams, name: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, axis=-1) * params[f"{name}.g"] + params[f"{name}.b"]


def _feed_forward(params: TransformerParams, name: str, x: Tensor) -> Tensor:
    return _dense(params, f"{name}.l2", ad.relu(_dense(params, f"{name}.l1", x)))


def weighted_multihead_attention(params: TransformerParams, name: str,
                                 Q: Tensor, KV: Tensor,
                                 w: Tensor | None) -> Tensor:
    """Multi-head attention with optional key weights.

    Q (B, n_q, L) attends into KV (B, m, L); each head projects to
    L/heads dimensions, attends with weights w (B, m) when given, and the
    concatenated heads pass through the output projection.
    """
    B, n_q, L = Q.shape
    m = KV.shape[1]
    h = params.heads
    d_k = L // h
    q = _dense(params, f"{name}.wq", Q)
    k = _dense(params, f"{name}.wk", KV)
    v = _dense(params, f"{name}.wv", KV)
    qh = ad.transpose(ad.reshape(q, (B, n_q, h, d_k)), (0, 2, 1, 3))
    kh = ad.transpose(ad.reshape(k, (B, m, h, d_k)), (0, 2, 1, 3))
    vh = ad.transpose(ad.reshape(v, (B, m, h, d_k)), (0, 2, 1, 3))
    scores = ad.matmul(qh, ad.transpose(kh)) * (1.0 / math.sqrt(d_k))
    heads = _attend(scores, vh, w)
    merged = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (B, n_q, L))
    return _dense(params, f"{name}.wo", merged)


def _encode(params: TransformerParams, scaled: Tensor, w: Tensor) -> Tensor:
    x = _dense(params, "in_proj", scaled)
    for i in range(params.enc_blocks):
        attn = weighted_multihead_attention(params, f"enc{i}.attn", x, x, w)
        x = _norm(params, f"enc{i}.ln1", x + attn)
        x = _norm(params, f"enc{i}.ln2", x + _feed_forward(params, f"enc{i}.ff", x))
    return x


def _decode(params: TransformerParams, encoded: Tensor, w: Tensor) -> Tensor:
    B = encoded.shape[0]
    z = ad.broadcast_to(params["seeds"], (B,) + params["seeds"].shape)
    for i in range(params.dec_blocks):
        self_attn = weighted_multihead_attention(params, f"dec{i}.self", z, z, None)
        z = _norm(params, f"dec{i}.ln1", z + self_attn)
        cross = weighted_multihead_attention(params, f"dec{i}.cross", z, encoded, w)
        z = _norm(params, f"dec{i}.ln2", z + cross)
        z = _norm(params, f"dec{i}.ln3", z + _feed_forward(params, f"dec{i}.ff", z))
    return _dense(params, "out_proj", z)


def _canonical_order(scaled: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Sort particles lexicographically by scaled position (weight as the
    final tie-break). Attention sums then always reduce in the same
    order, which is what makes the output exactly permutation-invariant."""
    B = scaled.shape[0]
    idx = np.empty(scaled.shape[:2], dtype=np.intp)
    for b in range(B):
        keys = (weights[b],) + tuple(scaled[b, :, j] for j in range(scaled.shape[2]))[::-1]
        idx[b] = np.lexsort(keys)
    return idx


def transformer_resample_batch(positions: Tensor, weights: Tensor,
                               params: TransformerParams) -> Tensor:
    """Map (B, n, d) weighted particles to (B, n, d) resampled positions
    (uniformly weighted by construction)."""
    B, n, d = positions.shape
    if n != params.n or d != params.d:
        raise ValueError(
            f"transformer expects n={params.n}, d={params.d}; got n={n}, d={d}"
        )
    with ad.no_grad():
        key_scaled, _ = scale_to_unit_batch(Tensor(positions.data))
    order = _canonical_order(key_scaled.data, weights.data)
    positions = ad.gather_rows(positions, order)
    weights = ad.gather_rows(weights, order)
    scaled, ctx = scale_to_unit_batch(positions)
    encoded = _encode(params, scaled, weights)
    decoded = _decode(params, encoded, weights)
    return rescale_from_unit_batch(decoded, ctx)


def transformer_resample(particles: ParticleSet,
                         params: TransformerParams) -> ParticleSet:
    """Resample one particle set with the learned model; output weights
    are exactly uniform."""
    pos = ad.reshape(particles.positions, (1, particles.n, particles.d))
    w = ad.reshape(particles.weights, (1, particles.n))
    out = transformer_resample_batch(pos, w, params)
    out_positions = ad.reshape(out, (particles.n, particles.d))
    uniform = Tensor(np.full(particles.n, 1.0 / particles.n))
    return ParticleSet(out_positions, uniform)
