"""Weighted attention reductions, scaling round trips, and the learned
resampler's invariance/equivariance and gradient contracts."""

import numpy as np
import pytest

from helpers import check_grads
from resample_forge import autodiff as ad
from resample_forge.autodiff import Tensor
from resample_forge.particles import KdeConfig, ParticleSet, normalize_weights
from resample_forge.rng import RngStream
from resample_forge.transformer import (
    ScaleContext,
    TransformerParams,
    rescale_from_unit,
    scale_to_unit,
    transformer_resample,
    transformer_resample_batch,
    weighted_attention,
    weighted_multihead_attention,
)


def standard_attention(q, K, V):
    scores = K @ q / np.sqrt(len(q))
    e = np.exp(scores - scores.max())
    a = e / e.sum()
    return a @ V


class TestWeightedAttention:
    def test_uniform_weights_reduce_to_standard(self):
        rng = np.random.default_rng(40)
        for _ in range(1000):
            m, dk, dv = rng.integers(1, 9), rng.integers(1, 6), rng.integers(1, 6)
            q = rng.normal(size=dk)
            K = rng.normal(size=(m, dk))
            V = rng.normal(size=(m, dv))
            w = np.full(m, 1.0 / m)
            out = weighted_attention(q, K, V, w)
            np.testing.assert_allclose(out.data, standard_attention(q, K, V),
                                       rtol=1e-12, atol=1e-12)

    def test_one_hot_weight_selects_value(self):
        rng = np.random.default_rng(41)
        for _ in range(50):
            m = 6
            q = rng.normal(size=4) * 10
            K = rng.normal(size=(m, 4))
            V = rng.normal(size=(m, 3))
            w = np.zeros(m)
            j = rng.integers(m)
            w[j] = 1.0
            out = weighted_attention(q, K, V, w)
            np.testing.assert_allclose(out.data, V[j], rtol=1e-12)

    def test_weight_scaling_invariance(self):
        rng = np.random.default_rng(42)
        q = rng.normal(size=3)
        K = rng.normal(size=(5, 3))
        V = rng.normal(size=(5, 2))
        w = rng.uniform(0.1, 1.0, 5)
        base = weighted_attention(q, K, V, w).data
        for c in (1e-6, 0.5, 3.0, 1e6):
            out = weighted_attention(q, K, V, w * c).data
            np.testing.assert_allclose(out, base, rtol=1e-12)

    def test_all_zero_weights_hard_error(self):
        with pytest.raises(ValueError, match="zero"):
            weighted_attention(np.ones(2), np.ones((3, 2)), np.ones((3, 2)),
                               np.zeros(3))

    def test_output_is_convex_combination(self):
        rng = np.random.default_rng(43)
        q = rng.normal(size=3)
        K = rng.normal(size=(7, 3))
        V = rng.normal(size=(7, 1))
        w = rng.uniform(0.0, 1.0, 7)
        out = weighted_attention(q, K, V, w).data
        assert V.min() - 1e-12 <= out[0] <= V.max() + 1e-12

    def test_gradients_including_weights(self):
        rng = np.random.default_rng(44)
        q = Tensor(rng.normal(size=3), requires_grad=True)
        K = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        V = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
        w = Tensor(rng.uniform(0.2, 1.0, 5), requires_grad=True)
        coeff = rng.normal(size=2)

        def f():
            return ad.sum_(weighted_attention(q, K, V, w) * Tensor(coeff))

        check_grads(f, [q, K, V, w])


class TestWeightedMultihead:
    def _params(self, latent, heads, n, d, seed=0):
        return TransformerParams.create(n=n, d=d, rng=RngStream(seed),
                                        latent=latent, heads=heads)

    def test_single_head_identity_projections_reduce_to_weighted_attention(self):
        rng = np.random.default_rng(45)
        L, m, nq = 4, 6, 3
        params = self._params(L, 1, m, 2)
        for proj in ("wq", "wk", "wv", "wo"):
            params.tensors[f"enc0.attn.{proj}.w"] = Tensor(np.eye(L))
            params.tensors[f"enc0.attn.{proj}.b"] = Tensor(np.zeros(L))
        Q = rng.normal(size=(1, nq, L))
        KV = rng.normal(size=(1, m, L))
        w = rng.uniform(0.1, 1.0, (1, m))
        out = weighted_multihead_attention(params, "enc0.attn", Tensor(Q),
                                           Tensor(KV), Tensor(w))
        for i in range(nq):
            row = weighted_attention(Q[0, i], KV[0], KV[0], w[0])
            np.testing.assert_allclose(out.data[0, i], row.data, rtol=1e-10)

    def test_uniform_weights_match_unweighted(self):
        rng = np.random.default_rng(46)
        params = self._params(8, 2, 5, 2, seed=1)
        Q = Tensor(rng.normal(size=(2, 4, 8)))
        KV = Tensor(rng.normal(size=(2, 5, 8)))
        uniform = Tensor(np.full((2, 5), 0.2))
        weighted = weighted_multihead_attention(params, "enc0.attn", Q, KV, uniform)
        plain = weighted_multihead_attention(params, "enc0.attn", Q, KV, None)
        np.testing.assert_allclose(weighted.data, plain.data, rtol=1e-12, atol=1e-12)

    def test_gradient_wrt_weights(self):
        rng = np.random.default_rng(47)
        params = self._params(8, 2, 5, 2, seed=2)
        Q = Tensor(rng.normal(size=(1, 3, 8)))
        KV = Tensor(rng.normal(size=(1, 5, 8)))
        w = Tensor(rng.uniform(0.2, 1.0, (1, 5)), requires_grad=True)
        coeff = rng.normal(size=(1, 3, 8))

        def f():
            out = weighted_multihead_attention(params, "enc0.attn", Q, KV, w)
            return ad.sum_(out * Tensor(coeff))

        check_grads(f, [w])


class TestScaling:
    def test_already_unit_range_unchanged(self):
        pos = np.array([[-1.0, -1.0], [1.0, 1.0], [0.0, 0.5]])
        s = ParticleSet(pos, np.full(3, 1 / 3))
        scaled, _ = scale_to_unit(s)
        np.testing.assert_allclose(scaled.data, pos, atol=1e-15)

    def test_zero_to_ten_maps_to_unit(self):
        s = ParticleSet(np.array([[0.0], [10.0]]), [0.5, 0.5])
        scaled, _ = scale_to_unit(s)
        np.testing.assert_allclose(scaled.data, [[-1.0], [1.0]])

    def test_constant_dimension_maps_to_zero_and_restores(self):
        pos = np.array([[2.0, 7.0], [5.0, 7.0], [3.0, 7.0]])
        s = ParticleSet(pos, np.full(3, 1 / 3))
        scaled, ctx = scale_to_unit(s)
        np.testing.assert_array_equal(scaled.data[:, 1], 0.0)
        # even if the model moves the degenerate coordinate, rescale
        # restores the constant
        moved = scaled.data.copy()
        moved[:, 1] = [0.3, -0.7, 2.0]
        back = rescale_from_unit(Tensor(moved), ctx)
        np.testing.assert_array_equal(back.data[:, 1], 7.0)

    def test_round_trip(self):
        rng = np.random.default_rng(48)
        pos = rng.normal(size=(6, 3)) * 40
        s = ParticleSet(pos, np.full(6, 1 / 6))
        scaled, ctx = scale_to_unit(s)
        back = rescale_from_unit(scaled, ctx)
        np.testing.assert_allclose(back.data, pos, rtol=1e-12, atol=1e-12)

    def test_midpoint_and_extrapolation(self):
        # normalized u maps to midpoint + u * half_range; u outside
        # [-1, 1] extends the same affine map
        s = ParticleSet(np.array([[2.0], [6.0]]), [0.5, 0.5])
        _, ctx = scale_to_unit(s)
        out = rescale_from_unit(Tensor(np.array([[0.0], [2.0]])), ctx)
        np.testing.assert_allclose(out.data, [[4.0], [8.0]])


def micro_params(seed=3, n=4, d=2):
    return TransformerParams.create(n=n, d=d, rng=RngStream(seed), latent=16, heads=2)


def random_particles(rng, n=4, d=2, scale=2.0):
    pos = rng.normal(size=(n, d)) * scale
    w = normalize_weights(rng.uniform(0.1, 1.0, n))
    return ParticleSet(pos, w)


class TestTransformerResample:
    def test_output_shape_and_uniform_weights(self):
        rng = np.random.default_rng(49)
        params = micro_params()
        s = random_particles(rng)
        out = transformer_resample(s, params)
        assert out.positions.shape == (4, 2)
        np.testing.assert_array_equal(out.weights.data, np.full(4, 0.25))

    def test_size_mismatch_rejected(self):
        rng = np.random.default_rng(50)
        params = micro_params(n=4, d=2)
        with pytest.raises(ValueError, match="expects"):
            transformer_resample(random_particles(rng, n=5, d=2), params)
        with pytest.raises(ValueError, match="expects"):
            transformer_resample(random_particles(rng, n=4, d=3), params)

    def test_exact_permutation_invariance(self):
        rng = np.random.default_rng(51)
        params = micro_params(n=6)
        s = random_particles(rng, n=6)
        base = transformer_resample(s, params).positions.data
        for _ in range(10):
            perm = rng.permutation(6)
            permuted = ParticleSet(s.positions.data[perm], s.weights.data[perm])
            out = transformer_resample(permuted, params).positions.data
            np.testing.assert_array_equal(out, base)

    def test_scale_equivariance(self):
        rng = np.random.default_rng(52)
        params = micro_params(n=5)
        for _ in range(10):
            s = random_particles(rng, n=5)
            a = rng.uniform(0.1, 10.0, 2)
            b = rng.normal(size=2) * 8
            mapped = ParticleSet(s.positions.data * a + b, s.weights.data)
            out_base = transformer_resample(s, params).positions.data
            out_mapped = transformer_resample(mapped, params).positions.data
            np.testing.assert_allclose(out_mapped, out_base * a + b,
                                       rtol=1e-9, atol=1e-9)

    def test_weight_scale_invariance_of_internals(self):
        # Attention is a ratio in the weights, so scaling all of them by
        # c > 0 (bypassing set validation) leaves the output unchanged.
        rng = np.random.default_rng(53)
        params = micro_params(n=5)
        s = random_particles(rng, n=5)
        base = transformer_resample(s, params).positions.data
        for c in (0.01, 7.0):
            scaled = ParticleSet(s.positions.data, s.weights.data * c,
                                 validate=False)
            out = transformer_resample(scaled, params).positions.data
            np.testing.assert_allclose(out, base, rtol=1e-9)

    def test_end_to_end_gradients_match_finite_differences(self):
        # Tiny model so central differences over every parameter finish
        # quickly; the loss is the KDE cross-entropy against a fixed
        # target set.
        from resample_forge.loss import resampling_loss

        rng = np.random.default_rng(54)
        params = micro_params(seed=5)
        positions = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        weights = Tensor(normalize_weights(rng.uniform(0.2, 1.0, 4)),
                         requires_grad=True)
        targets = ParticleSet(rng.normal(size=(4, 2)),
                              normalize_weights(rng.uniform(0.2, 1.0, 4)))

        def f():
            s = ParticleSet(positions, weights, validate=False)
            out = transformer_resample(s, params)
            return resampling_loss(out, targets, KdeConfig(1.0))

        tensors = [positions, weights] + params.parameters()
        check_grads(f, tensors, rtol=1e-3, atol=1e-6)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(55)
        params = micro_params(n=4)
        sets = [random_particles(rng) for _ in range(3)]
        pos = Tensor(np.stack([s.positions.data for s in sets]))
        w = Tensor(np.stack([s.weights.data for s in sets]))
        batch = transformer_resample_batch(pos, w, params)
        for i, s in enumerate(sets):
            single = transformer_resample(s, params)
            np.testing.assert_allclose(batch.data[i], single.positions.data,
                                       rtol=1e-12, atol=1e-12)


class TestCheckpointRoundTrip:
    def test_save_load(self, tmp_path):
        rng = np.random.default_rng(56)
        params = micro_params(seed=6)
        path = tmp_path / "model.ptchk"
        params.save(path)
        loaded = TransformerParams.load(path)
        assert (loaded.n, loaded.d, loaded.latent, loaded.heads) == (4, 2, 16, 2)
        s = random_particles(rng)
        a = transformer_resample(s, params).positions.data
        b = transformer_resample(s, loaded).positions.data
        np.testing.assert_array_equal(a, b)
