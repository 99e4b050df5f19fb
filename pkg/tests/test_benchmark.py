"""Synthetic benchmark generation and sweep contracts."""

import struct

import numpy as np
import pytest

from resample_forge.benchmark import (
    bandwidth_sweep,
    generate_case,
    generate_dataset,
    generate_mixture,
    load_dataset_pair,
)
from resample_forge.resamplers import ResamplerKind
from resample_forge.rng import RngStream


class TestMixture:
    def test_parameter_ranges(self):
        for i in range(200):
            m = generate_mixture(RngStream(1).split(i))
            assert np.all((m.means >= -5) & (m.means <= 5))
            assert np.all((m.stds >= 1) & (m.stds <= 3))
            assert np.all(m.probs[:2] >= 0.2) and np.all(m.probs[:2] <= 0.4)
            assert 0.2 <= m.probs[2] <= 0.6
            assert m.probs.sum() == pytest.approx(1.0)

    def test_log_density_matches_direct_sum(self):
        rng = RngStream(2)
        m = generate_mixture(rng)
        x = rng.normal(0, 3, (10, 5))
        direct = np.zeros(10)
        for c in range(3):
            z = (x - m.means[c]) / m.stds[c]
            direct += m.probs[c] * np.exp(-0.5 * (z * z).sum(axis=1)) / (
                (2 * np.pi) ** 2.5 * np.prod(m.stds[c])
            )
        np.testing.assert_allclose(m.log_density(x), np.log(direct), rtol=1e-10)

    def test_sample_statistics_in_spec_ranges(self):
        # empirical means within the mean box (loose distributional sanity)
        rng = RngStream(3)
        m = generate_mixture(rng)
        draws = m.sample(rng.split(9), 20000)
        mixture_mean = (m.probs[:, None] * m.means).sum(axis=0)
        np.testing.assert_allclose(draws.mean(axis=0), mixture_mean, atol=0.15)
        assert np.all(draws.std(axis=0) < 3 + 5 + 1)  # component spread + mean spread


class TestGenerateCase:
    def test_weights_normalized_and_nonnegative(self):
        for i in range(100):
            case = generate_case(RngStream(4).split(i))
            assert case.inputs.weights.data.sum() == pytest.approx(1.0)
            assert np.all(case.inputs.weights.data >= 0)
            assert case.inputs.n == 32 and case.inputs.d == 5
            assert case.targets.n == 32

    def test_equal_broad_mixtures_give_near_uniform_weights(self):
        # When sampling and weighting mixtures coincide and overlap
        # heavily, weight variation stays moderate over many cases.
        from resample_forge.benchmark import MixtureSpec, _weighted_draw

        cvs = []
        for i in range(1000):
            rng = RngStream(5).split(i)
            means = np.zeros((3, 5))
            stds = np.full((3, 5), 3.0)
            m = MixtureSpec(means, stds, np.array([0.3, 0.3, 0.4]))
            s = _weighted_draw(m, m, rng, 32)
            w = s.weights.data
            cvs.append(w.std() / w.mean())
        assert np.median(cvs) < 1.0

    def test_fresh_targets_by_default_reuse_on_flag(self):
        case = generate_case(RngStream(6))
        assert not np.array_equal(case.inputs.positions.data,
                                  case.targets.positions.data)
        reused = generate_case(RngStream(6), reuse_inputs_as_targets=True)
        assert reused.targets is reused.inputs

    def test_deterministic_given_seed(self):
        a = generate_case(RngStream(7))
        b = generate_case(RngStream(7))
        assert a.inputs.positions.data.tobytes() == b.inputs.positions.data.tobytes()
        assert a.targets.weights.data.tobytes() == b.targets.weights.data.tobytes()


class TestGenerateDataset:
    def test_headers_report_split(self, tmp_path):
        generate_dataset(10, (8, 2), RngStream(8), tmp_path)
        for name, count in (("train", 8), ("eval", 2)):
            with open(tmp_path / f"{name}_inputs.pset", "rb") as f:
                f.read(5)
                got, n, d = struct.unpack("<3Q", f.read(24))
            assert (got, n, d) == (count, 32, 5)

    def test_split_must_sum(self, tmp_path):
        with pytest.raises(ValueError, match="split"):
            generate_dataset(10, (5, 2), RngStream(9), tmp_path)

    def test_regeneration_is_byte_identical(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        generate_dataset(12, (9, 3), RngStream(10), a_dir)
        generate_dataset(12, (9, 3), RngStream(10), b_dir)
        for name in ("train_inputs", "train_targets", "eval_inputs", "eval_targets"):
            assert (a_dir / f"{name}.pset").read_bytes() == \
                   (b_dir / f"{name}.pset").read_bytes()

    def test_roundtrip_pairing(self, tmp_path):
        paths = generate_dataset(6, (4, 2), RngStream(11), tmp_path)
        inputs, targets = load_dataset_pair(paths["eval_inputs"],
                                            paths["eval_targets"])
        assert len(inputs) == len(targets) == 2


@pytest.fixture(scope="module")
def eval_data():
    cases = [generate_case(RngStream(12).split(i)) for i in range(40)]
    return [c.inputs for c in cases], [c.targets for c in cases]


class TestBandwidthSweep:
    def test_one_record_per_bandwidth(self, eval_data):
        inputs, targets = eval_data
        grid = [0.1, 0.5, 1.0]
        records = bandwidth_sweep(ResamplerKind("multinomial"), inputs, targets,
                                  grid, RngStream(13))
        assert [r["bandwidth"] for r in records] == grid
        assert all(r["n_cases"] == 40 for r in records)

    def test_none_resampler_finite_for_all_bandwidths(self, eval_data):
        inputs, targets = eval_data
        records = bandwidth_sweep(ResamplerKind("none"), inputs, targets,
                                  [0.05, 0.1, 0.2, 0.5, 1.0], RngStream(14))
        assert all(np.isfinite(r["mean_loss"]) for r in records)

    def test_losses_finite_and_smooth_in_bandwidth(self, eval_data):
        inputs, targets = eval_data
        grid = list(np.geomspace(0.2, 2.0, 8))
        records = bandwidth_sweep(ResamplerKind("systematic"), inputs, targets,
                                  grid, RngStream(15))
        losses = np.array([r["mean_loss"] for r in records])
        assert np.all(np.isfinite(losses))
        # adjacent grid points never jump by an order of magnitude
        diffs = np.abs(np.diff(losses))
        assert np.all(diffs < 10 * (np.abs(losses[:-1]) + 1))

    def test_deterministic_given_seed(self, eval_data):
        inputs, targets = eval_data
        a = bandwidth_sweep(ResamplerKind("soft", 0.5), inputs, targets, [0.5],
                            RngStream(16))
        b = bandwidth_sweep(ResamplerKind("soft", 0.5), inputs, targets, [0.5],
                            RngStream(16))
        assert a == b

    def test_empty_or_invalid_bandwidths_rejected(self, eval_data):
        inputs, targets = eval_data
        with pytest.raises(ValueError, match="bandwidths"):
            bandwidth_sweep(ResamplerKind("none"), inputs, targets, [],
                            RngStream(17))
        with pytest.raises(ValueError, match="bandwidths"):
            bandwidth_sweep(ResamplerKind("none"), inputs, targets, [0.5, -1.0],
                            RngStream(17))

    def test_transformer_without_checkpoint_is_error(self, eval_data):
        inputs, targets = eval_data
        with pytest.raises(ValueError, match="parameters"):
            bandwidth_sweep(ResamplerKind("transformer"), inputs, targets, [0.5],
                            RngStream(18))
