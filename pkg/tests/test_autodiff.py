"""Forward examples, gradient checks, and optimizer behavior for the
autodiff engine."""

import numpy as np
import pytest

from helpers import check_grads, numeric_grad
from resample_forge import autodiff as ad
from resample_forge.autodiff import Adam, Tensor, clip_global_norm


def rand(rng, *shape):
    return Tensor(rng.uniform(-2.0, 2.0, shape), requires_grad=True)


class TestForward:
    def test_softmax_symmetry(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3])

    def test_softmax_rows_normalized(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(50, 7)) * 30)
        out = ad.softmax(x, axis=-1)
        assert np.all(out.data >= 0)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_matmul_against_triple_loop(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(3, 4))
        out = ad.matmul(Tensor(a), Tensor(b)).data
        expected = np.zeros((2, 4))
        for i in range(2):
            for j in range(4):
                for k in range(3):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(out, expected, atol=1e-14)

    def test_matmul_identity_padded(self):
        eye = Tensor(np.eye(2, 3))
        v = Tensor([[1.0], [2.0], [3.0]])
        np.testing.assert_allclose(ad.matmul(eye, v).data, [[1.0], [2.0]])

    def test_layer_norm_constant_input_is_zero(self):
        out = ad.layer_norm(Tensor([4.0, 4.0, 4.0]))
        np.testing.assert_allclose(out.data, 0.0)

    def test_shape_mismatch_is_hard_error(self):
        with pytest.raises(ValueError, match="matmul"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_log_of_nonpositive_is_hard_error(self):
        with pytest.raises(ValueError, match="log"):
            ad.log(Tensor([1.0, 0.0]))

    def test_divide_by_zero_is_hard_error(self):
        with pytest.raises(ValueError, match="divide"):
            ad.divide(Tensor([1.0]), Tensor([0.0]))


class TestBackward:
    def test_square_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        ad.sum_(x * x).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_fanout_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = ad.sum_(x * 3.0) + ad.sum_(x * x)
        y.backward()
        np.testing.assert_allclose(x.grad, 3.0 + 2.0 * x.data)

    def test_nonscalar_root_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * x).backward()

    def test_backward_does_not_mutate_forward_data(self):
        rng = np.random.default_rng(2)
        x = rand(rng, 3, 3)
        y = ad.exp(x)
        snapshot = y.data.copy()
        ad.sum_(y * y).backward()
        np.testing.assert_array_equal(y.data, snapshot)

    def test_graph_topological_order(self):
        x = Tensor([2.0], requires_grad=True)
        z = ad.sum_(ad.exp(x) * x)
        graph = ad.Graph(z)
        position = {id(t): i for i, t in enumerate(graph.nodes)}
        for node in graph.nodes:
            for parent in node.parents:
                assert position[id(parent)] < position[id(node)]


# Randomized finite-difference checks: 100 draws per op, fixed seed.
N_TRIALS = 100


def _positive(rng, *shape):
    return Tensor(rng.uniform(0.5, 2.0, shape), requires_grad=True)


OP_CASES = {
    "add": lambda rng: ((lambda a, b: ad.sum_((a + b) * (a + b))),
                        [rand(rng, 3, 4), rand(rng, 3, 4)]),
    "add_broadcast": lambda rng: ((lambda a, b: ad.sum_((a + b) * (a + b))),
                                  [rand(rng, 3, 4), rand(rng, 4)]),
    "subtract": lambda rng: ((lambda a, b: ad.sum_((a - b) * a)),
                             [rand(rng, 2, 5), rand(rng, 2, 5)]),
    "multiply": lambda rng: ((lambda a, b: ad.sum_(a * b * a)),
                             [rand(rng, 4, 3), rand(rng, 3)]),
    "divide": lambda rng: ((lambda a, b: ad.sum_(a / b)),
                           [rand(rng, 3, 3), _positive(rng, 3, 3)]),
    "matmul": lambda rng: ((lambda a, b: ad.sum_(ad.matmul(a, b) ** 2)),
                           [rand(rng, 3, 4), rand(rng, 4, 2)]),
    "matmul_batched": lambda rng: ((lambda a, b: ad.sum_(ad.matmul(a, b) ** 2)),
                                   [rand(rng, 5, 3, 4), rand(rng, 4, 2)]),
    "exp": lambda rng: ((lambda a: ad.sum_(ad.exp(a))), [rand(rng, 3, 3)]),
    "log": lambda rng: ((lambda a: ad.sum_(ad.log(a) ** 2)), [_positive(rng, 4, 4)]),
    "power": lambda rng: ((lambda a: ad.sum_(a ** 0.5)), [_positive(rng, 6)]),
    "sum_axis": lambda rng: ((lambda a: ad.sum_(ad.sum_(a, axis=1) ** 2)),
                             [rand(rng, 3, 5)]),
    "mean_axis": lambda rng: ((lambda a: ad.sum_(ad.mean(a, axis=0) ** 2)),
                              [rand(rng, 4, 3)]),
    "max": lambda rng: ((lambda a: ad.sum_(ad.max_(a, axis=1) ** 2)),
                        [rand(rng, 4, 6)]),
    "min": lambda rng: ((lambda a: ad.sum_(ad.min_(a, axis=0) ** 2)),
                        [rand(rng, 4, 6)]),
    "softmax": lambda rng: ((lambda a: ad.sum_(ad.softmax(a, axis=-1) ** 2)),
                            [rand(rng, 3, 5)]),
    "concat": lambda rng: ((lambda a, b: ad.sum_(ad.concatenate([a, b], axis=1) ** 2)),
                           [rand(rng, 3, 2), rand(rng, 3, 4)]),
    "split": lambda rng: ((lambda a: ad.sum_(ad.split(a, 3, axis=1)[1] ** 2)),
                          [rand(rng, 2, 6)]),
    "transpose": lambda rng: ((lambda a: ad.sum_(ad.transpose(a) ** 3)),
                              [rand(rng, 3, 4)]),
    "reshape": lambda rng: ((lambda a: ad.sum_(ad.reshape(a, (2, 6)) ** 2)),
                            [rand(rng, 3, 4)]),
    "broadcast": lambda rng: ((lambda a: ad.sum_(ad.broadcast_to(a, (5, 4)) ** 2)),
                              [rand(rng, 4)]),
    "layer_norm": lambda rng: ((lambda a: ad.sum_(ad.layer_norm(a) ** 2)),
                               [rand(rng, 4, 6)]),
    "relu": lambda rng: ((lambda a: ad.sum_(ad.relu(a) ** 2)), [rand(rng, 5, 5)]),
    "clamp": lambda rng: ((lambda a: ad.sum_(ad.clamp(a, -1.0, 1.0) ** 2)),
                          [rand(rng, 5, 5)]),
    "cos": lambda rng: ((lambda a: ad.sum_(ad.cos(a))), [rand(rng, 7)]),
    "sin": lambda rng: ((lambda a: ad.sum_(ad.sin(a))), [rand(rng, 7)]),
    "gather": lambda rng: ((lambda a: ad.sum_(ad.gather_rows(a, np.array([0, 2, 2, 1])) ** 2)),
                           [rand(rng, 3, 4)]),
    "gather_batched": lambda rng: (
        (lambda a: ad.sum_(ad.gather_rows(a, np.array([[0, 1, 1], [2, 2, 0]])) ** 2)),
        [rand(rng, 2, 3, 4)],
    ),
    "logsumexp": lambda rng: ((lambda a: ad.sum_(ad.logsumexp(a, axis=1))),
                              [rand(rng, 3, 5)]),
    "weighted_logsumexp": lambda rng: (
        (lambda a, w: ad.sum_(ad.weighted_logsumexp(a, w, axis=1))),
        [rand(rng, 3, 5), _positive(rng, 5)],
    ),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    trials = N_TRIALS // 10 if name in ("matmul_batched", "gather_batched") else N_TRIALS
    for _ in range(trials):
        fn, tensors = OP_CASES[name](rng)
        check_grads(lambda: fn(*tensors), tensors)


class TestClipGlobalNorm:
    def _params(self, grads):
        out = []
        for g in grads:
            p = Tensor(np.zeros_like(np.asarray(g, dtype=float)), requires_grad=True)
            p.grad = np.asarray(g, dtype=float)
            out.append(p)
        return out

    def test_under_threshold_unchanged(self):
        params = self._params([[3.0], [4.0]])  # norm 5
        pre = clip_global_norm(params, 10.0)
        assert pre == 5.0
        np.testing.assert_array_equal(params[0].grad, [3.0])

    def test_over_threshold_scaled(self):
        params = self._params([[12.0], [16.0]])  # norm 20
        pre = clip_global_norm(params, 10.0)
        assert pre == pytest.approx(20.0)
        np.testing.assert_allclose(params[0].grad, [6.0])
        np.testing.assert_allclose(params[1].grad, [8.0])
        assert ad.global_grad_norm(params) <= 10.0

    def test_zero_gradients(self):
        params = self._params([[0.0, 0.0]])
        assert clip_global_norm(params, 10.0) == 0.0
        np.testing.assert_array_equal(params[0].grad, [0.0, 0.0])

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        params = self._params([rng.normal(size=7) * 9 for _ in range(4)])
        clip_global_norm(params, 1.0)
        once = [p.grad.copy() for p in params]
        clip_global_norm(params, 1.0)
        for before, p in zip(once, params):
            np.testing.assert_array_equal(before, p.grad)

    def test_post_clip_norm_never_exceeds_bound(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            params = self._params([rng.normal(size=5) * rng.uniform(1, 100)
                                   for _ in range(3)])
            clip_global_norm(params, 10.0)
            assert ad.global_grad_norm(params) <= 10.0


class TestAdam:
    def test_zero_gradient_leaves_param(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        before = p.data.copy()
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_moves_against_gradient_sign(self):
        p = Tensor([0.0], requires_grad=True)
        opt = Adam([p], lr=0.01)
        for _ in range(50):
            p.grad = np.array([2.5])
            opt.step()
        assert p.data[0] < 0

    def test_first_step_magnitude_is_lr(self):
        # From zero moments: m_hat = g, v_hat = g^2, so the update is
        # lr * g / (|g| + eps) ~ lr * sign(g).
        p = Tensor([5.0], requires_grad=True)
        opt = Adam([p], lr=0.001)
        p.grad = np.array([3.7])
        opt.step()
        assert p.data[0] == pytest.approx(5.0 - 0.001, abs=1e-9)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        tensors = {
            "weights.layer0": rng.normal(size=(3, 4)),
            "bias": rng.normal(size=(4,)),
            "scalar": np.array(2.5),
        }
        path = tmp_path / "params.ptchk"
        ad.save_checkpoint(path, tensors)
        loaded = ad.load_checkpoint(path)
        assert set(loaded) == set(tensors)
        for name in tensors:
            np.testing.assert_array_equal(loaded[name], np.asarray(tensors[name]))

    def test_magic_enforced(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTCHK" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            ad.load_checkpoint(path)


class TestNoGrad:
    def test_tape_skipped(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = x * x
        assert not y.requires_grad
        assert y.parents == ()

    def test_detach_blocks_gradient(self):
        x = Tensor([3.0], requires_grad=True)
        y = ad.sum_(x.detach() * x)
        y.backward()
        np.testing.assert_allclose(x.grad, [3.0])
