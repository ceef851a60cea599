import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardrefine import multitask as mt
from cardrefine.phantom import generate_phantom
from cardrefine.volgrid import (
    LANDMARK_CLASS_COUNT,
    LabelGrid,
    LandmarkSet,
    ProbGrid,
    VolumeGrid,
    argmax_labels,
    one_hot,
)
from conftest import random_labels
from oracles import dice_loss_loop, finite_difference_grad, weighted_ce_loop


def random_probs(rng, channels, dims=(8, 8, 8)):
    """Strictly positive normalised probabilities."""
    raw = rng.random((channels, *dims)) + 0.05
    return raw / raw.sum(axis=0, keepdims=True)


def prob_grid(arr, spacing=(1.0, 1.0, 1.0)):
    return ProbGrid(np.asarray(arr, np.float32), spacing)


class TestSoftmax:
    def test_symmetry(self):
        z = np.zeros((2, 1, 1, 1))
        np.testing.assert_allclose(mt.softmax_channels(z), 0.5)

    def test_large_logits_stable(self):
        z = np.zeros((2, 1, 1, 1))
        z[0] = 1000.0
        p = mt.softmax_channels(z)
        assert np.isfinite(p).all()
        assert p[0, 0, 0, 0] == pytest.approx(1.0, abs=1e-12)

    @given(st.floats(-50, 50))
    @settings(max_examples=25, deadline=None)
    def test_shift_invariance(self, shift):
        rng = np.random.default_rng(7)
        z = rng.normal(size=(4, 3, 3, 3))
        np.testing.assert_allclose(
            mt.softmax_channels(z + shift), mt.softmax_channels(z), atol=1e-6
        )

    def test_nonfinite_rejected(self):
        z = np.zeros((2, 1, 1, 1))
        z[0] = np.nan
        with pytest.raises(FloatingPointError):
            mt.softmax_channels(z)

    def test_channel_sum(self, rng):
        z = rng.normal(size=(5, 4, 4, 4)) * 10
        p = mt.softmax_channels(z)
        np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-5)


class TestDiceLoss:
    def test_perfect_prediction(self, rng):
        lab = random_labels(rng, dims=(6, 6, 6), ensure_all=True)
        loss = mt.dice_loss(one_hot(lab), lab, epsilon=1e-8)
        assert loss == pytest.approx(-5.0, abs=1e-6)

    def test_uniform_prediction_matches_loop_oracle(self, rng):
        lab = random_labels(rng, dims=(4, 4, 4), ensure_all=True)
        # oracle sees the same float32-rounded values the grid stores
        probs = np.full((5, 4, 4, 4), 0.2, dtype=np.float32).astype(np.float64)
        expected = dice_loss_loop(probs, lab.labels, 1e-8)
        got = mt.dice_loss(prob_grid(probs), lab, 1e-8)
        assert got == pytest.approx(expected, rel=1e-9)

    def test_random_prediction_matches_loop_oracle(self, rng):
        lab = random_labels(rng, dims=(4, 3, 4))
        probs = random_probs(rng, 5, dims=(4, 3, 4)).astype(np.float32).astype(np.float64)
        expected = dice_loss_loop(probs, lab.labels, 1e-6)
        got = mt.dice_loss(prob_grid(probs), lab, 1e-6)
        assert got == pytest.approx(expected, rel=1e-9)

    def test_disjoint_support_guarded(self):
        lab = LabelGrid(np.zeros((4, 4, 4), np.uint8), (1, 1, 1), class_count=5)
        probs = np.zeros((5, 4, 4, 4))
        probs[1] = 1.0  # all mass on class 1, reference is all class 0
        loss = mt.dice_loss(prob_grid(probs), lab, 1e-8)
        assert abs(loss) < 1e-3

    def test_range(self, rng):
        for _ in range(5):
            lab = random_labels(rng, dims=(5, 5, 5))
            probs = random_probs(rng, 5, dims=(5, 5, 5))
            loss = mt.dice_loss(prob_grid(probs), lab, 1e-8)
            assert -5.0 <= loss <= 0.0

    def test_channel_mismatch(self, rng):
        lab = random_labels(rng, dims=(4, 4, 4), class_count=5)
        with pytest.raises(ValueError):
            mt.dice_loss(prob_grid(random_probs(rng, 3, (4, 4, 4))), lab)


class TestDiceGrad:
    def test_matches_finite_differences(self, rng):
        lab = random_labels(rng, dims=(8, 8, 8), ensure_all=True)
        probs = random_probs(rng, 5)
        grad = mt.dice_loss_grad(prob_grid(probs), lab, 1e-6)
        work = probs.copy()
        coords = [
            (int(rng.integers(5)),) + tuple(int(rng.integers(8)) for _ in range(3))
            for _ in range(20)
        ]
        fd = finite_difference_grad(
            lambda p: dice_loss_loop(p, lab.labels, 1e-6), work, coords
        )
        for idx, expected in fd.items():
            rel = abs(grad[idx] - expected) / max(abs(expected), 1e-8)
            assert rel <= 1e-3, (idx, grad[idx], expected)

    def test_finite_at_perfect_prediction(self, rng):
        lab = random_labels(rng, dims=(4, 4, 4), ensure_all=True)
        grad = mt.dice_loss_grad(one_hot(lab), lab, 1e-8)
        assert np.isfinite(grad).all()


class TestClassWeights:
    def test_simple_arithmetic(self):
        labels = np.zeros((2, 2, 2), np.uint8)
        labels[0, 0, 0] = 1
        lab = LabelGrid(labels, (1, 1, 1), class_count=LANDMARK_CLASS_COUNT)
        w = mt.class_weights(lab)
        assert w[1] == pytest.approx(0.875)
        assert w[0] == pytest.approx(1.0 - 7.0 / 8.0)

    def test_all_background(self):
        lab = LabelGrid(np.zeros((2, 2, 2), np.uint8), (1, 1, 1), class_count=7)
        assert mt.class_weights(lab)[0] == 0.0

    def test_paper_scale_grid(self):
        # 192 x 192 x 80 with one voxel per landmark class
        total = 192 * 192 * 80
        labels = np.zeros((192, 192, 80), np.uint8)
        for k in range(1, 7):
            labels[k, 0, 0] = k
        lab = LabelGrid(labels, (1.25, 1.25, 2.0), class_count=7)
        w = mt.class_weights(lab)
        assert w[1] == pytest.approx(1.0 - 1.0 / total, abs=1e-12)
        assert w[1] == pytest.approx(0.9999997, abs=1e-7)

    def test_range_and_exactness(self, rng):
        lab = random_labels(rng, dims=(6, 6, 6), class_count=7)
        w = mt.class_weights(lab)
        assert np.all(w >= 0.0) and np.all(w < 1.0)
        counts = np.bincount(lab.labels.reshape(-1), minlength=7)
        np.testing.assert_allclose(w, 1.0 - counts / lab.labels.size, atol=0)


class TestWeightedCe:
    def test_perfect_prediction_near_zero(self, rng):
        lab = random_labels(rng, dims=(6, 6, 6), class_count=7, ensure_all=True)
        loss = mt.weighted_ce_loss(one_hot(lab), lab)
        assert 0.0 <= loss <= 1e-4

    def test_uniform_matches_closed_form_and_loop(self, rng):
        lab = random_labels(rng, dims=(4, 4, 4), class_count=7)
        probs = np.full((7, 4, 4, 4), 1.0 / 7.0, dtype=np.float32).astype(np.float64)
        got = mt.weighted_ce_loss(prob_grid(probs), lab)
        counts = np.bincount(lab.labels.reshape(-1), minlength=7)
        w = 1.0 - counts / lab.labels.size
        closed = float((w * counts).sum() * np.log(7.0))
        assert got == pytest.approx(closed, rel=1e-5)
        assert got == pytest.approx(weighted_ce_loop(probs, lab.labels), rel=1e-9)

    def test_nonnegative(self, rng):
        for _ in range(5):
            lab = random_labels(rng, dims=(4, 4, 4), class_count=7)
            probs = random_probs(rng, 7, dims=(4, 4, 4))
            assert mt.weighted_ce_loss(prob_grid(probs), lab) >= 0.0

    def test_grad_through_softmax_matches_fd(self, rng):
        lab = random_labels(rng, dims=(8, 8, 8), class_count=7, ensure_all=True)
        logits = rng.normal(size=(7, 8, 8, 8))

        def loss_of_logits(z):
            # float64 oracle path: float32 grid storage would drown the
            # finite-difference signal in rounding noise
            return weighted_ce_loop(mt.softmax_channels(z), lab.labels)

        p = mt.softmax_channels(logits)
        analytic = mt.softmax_backward(
            p, mt.weighted_ce_grad(prob_grid(p), lab)
        )
        coords = [
            (int(rng.integers(7)),) + tuple(int(rng.integers(8)) for _ in range(3))
            for _ in range(20)
        ]
        fd = finite_difference_grad(loss_of_logits, logits.copy(), coords)
        for idx, expected in fd.items():
            rel = abs(analytic[idx] - expected) / max(abs(expected), 1e-6)
            assert rel <= 1e-3, (idx, analytic[idx], expected)


class TestTotalLossAndModel:
    def make_sample(self, rng, dims=(10, 10, 6)):
        vol = VolumeGrid(rng.random(dims, dtype=np.float32), (1.25, 1.25, 2.0))
        seg = random_labels(rng, dims=dims, class_count=5)
        lmk = LabelGrid(np.zeros(dims, np.uint8), (1.25, 1.25, 2.0), class_count=7)
        arr = lmk.labels
        for k in range(1, 7):
            arr[k, k % dims[1], k % dims[2]] = k
        return vol, seg, LabelGrid(arr, (1.25, 1.25, 2.0), class_count=7)

    def test_alpha_beta_zero_is_dice_alone(self, rng):
        sample = self.make_sample(rng)
        model = mt.ToyModel.init_random(0)
        w = mt.LossWeights(alpha=0.0, beta=0.0)
        total = mt.total_loss(model, [sample], w)
        seg_p, _ = mt.predict(model, sample[0])
        assert total == pytest.approx(mt.dice_loss(seg_p, sample[1], w.epsilon), rel=1e-9)

    def test_zero_weights_no_regulariser(self, rng):
        sample = self.make_sample(rng)
        model = mt.ToyModel(np.zeros((12, 3, 5, 5)), np.zeros(12))
        w = mt.LossWeights(alpha=0.0, beta=1.0)
        seg_p, _ = mt.predict(model, sample[0])
        assert mt.total_loss(model, [sample], w) == pytest.approx(
            mt.dice_loss(seg_p, sample[1], w.epsilon), rel=1e-9
        )

    def test_unit_kernel_frobenius(self, rng):
        sample = self.make_sample(rng)
        kernel = np.zeros((12, 1, 5, 5))
        kernel[0] = 1.0  # 25 ones
        model = mt.ToyModel(kernel, np.zeros(12))
        w0 = mt.total_loss(model, [sample], mt.LossWeights(alpha=0.0, beta=0.0))
        w1 = mt.total_loss(model, [sample], mt.LossWeights(alpha=0.0, beta=1.0))
        assert w1 - w0 == pytest.approx(25.0, abs=1e-9)

    def test_predict_uniform_for_zero_model(self, rng):
        sample = self.make_sample(rng)
        model = mt.ToyModel(np.zeros((12, 3, 5, 5)), np.zeros(12))
        seg_p, lmk_p = mt.predict(model, sample[0])
        np.testing.assert_allclose(seg_p.probs, 0.2, atol=1e-6)
        np.testing.assert_allclose(lmk_p.probs, 1.0 / 7.0, atol=1e-6)

    def test_predict_deterministic(self, rng):
        sample = self.make_sample(rng)
        model = mt.ToyModel.init_random(3)
        a = mt.predict(model, sample[0])
        b = mt.predict(model, sample[0])
        assert np.array_equal(a[0].probs, b[0].probs)


class TestTrainToy:
    def make_sample(self, rng, dims=(10, 10, 6)):
        return TestTotalLossAndModel().make_sample(rng, dims)

    def test_separable_phantom_accuracy(self):
        vol, lab, lm = generate_phantom(0, dims=(48, 48, 32), spacing=(1.6, 1.6, 2.5))
        lmk_grid = mt.rasterize_landmarks(lm, lab)
        # two-class variant: bright ellipsoid (cavity) on dark background
        two = LabelGrid((lab.labels == 1).astype(np.uint8), lab.spacing,
                        lab.origin, class_count=5)
        result = mt.train_toy(
            [(vol, two, lmk_grid)], mt.LossWeights(), epochs=200, lr=0.05, seed=0
        )
        seg_p, _ = mt.predict(result.model, vol)
        acc = float((argmax_labels(seg_p).labels == two.labels).mean())
        assert acc >= 0.95
        assert result.trace[-1].total < result.trace[0].total

    def test_seed_determinism_bit_identical(self, rng):
        sample = self.make_sample(rng)
        a = mt.train_toy([sample], mt.LossWeights(), epochs=5, lr=0.01, seed=11)
        b = mt.train_toy([sample], mt.LossWeights(), epochs=5, lr=0.01, seed=11)
        assert np.array_equal(a.model.kernel, b.model.kernel)
        assert np.array_equal(a.model.bias, b.model.bias)

    def test_alpha_zero_landmark_channels_decay_only(self, rng):
        sample = self.make_sample(rng)
        w = mt.LossWeights(alpha=0.0, beta=1e-3)
        init = mt.ToyModel.init_random(7)
        result = mt.train_toy([sample], w, epochs=1, lr=0.1, seed=7, optimizer="sgd")
        # landmark channels see only the weight-decay gradient 2*beta*W
        expected = init.kernel[5:] * (1.0 - 0.1 * 2.0 * w.beta)
        np.testing.assert_allclose(result.model.kernel[5:], expected, rtol=1e-10)
        # segmentation channels moved by more than decay alone
        seg_expected = init.kernel[:5] * (1.0 - 0.1 * 2.0 * w.beta)
        assert not np.allclose(result.model.kernel[:5], seg_expected, rtol=1e-7)

    def test_nonfinite_loss_aborts(self, rng):
        sample = self.make_sample(rng)
        with pytest.raises(FloatingPointError):
            mt.train_toy([sample], mt.LossWeights(), epochs=40, lr=1e8, seed=0,
                         optimizer="sgd")

    def test_loss_trace_csv(self, rng, tmp_path):
        sample = self.make_sample(rng)
        path = tmp_path / "trace.csv"
        result = mt.train_toy([sample], mt.LossWeights(), epochs=3, lr=0.01,
                              seed=0, trace_path=path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,L_D,L_L,regulariser,total"
        assert len(lines) == 4
        assert len(result.trace) == 3


class TestRasterizeLandmarks:
    def test_single_voxel_per_class(self, rng):
        vol, lab, lm = generate_phantom(1, dims=(48, 48, 32), spacing=(1.6, 1.6, 2.5))
        grid = mt.rasterize_landmarks(lm, lab)
        counts = np.bincount(grid.labels.reshape(-1), minlength=7)
        assert list(counts[1:]) == [1] * 6
        assert grid.class_count == LANDMARK_CLASS_COUNT

    def test_collision_rejected(self):
        geom = VolumeGrid(np.zeros((8, 8, 8), np.float32), (1, 1, 1))
        pos = np.tile([4.0, 4.0, 4.0], (6, 1))
        with pytest.raises(ValueError, match="collide"):
            mt.rasterize_landmarks(LandmarkSet.from_positions(pos), geom)

    def test_outside_rejected(self):
        geom = VolumeGrid(np.zeros((4, 4, 4), np.float32), (1, 1, 1))
        pos = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [2, 2, 2],
                        [50, 0, 0]], float)
        with pytest.raises(ValueError, match="outside"):
            mt.rasterize_landmarks(LandmarkSet.from_positions(pos), geom)


class TestModelIo:
    def test_round_trip(self, rng, tmp_path):
        model = mt.ToyModel.init_random(5)
        path = tmp_path / "model.mgrid"
        mt.save_model(model, path)
        back = mt.load_model(path)
        np.testing.assert_allclose(back.kernel, model.kernel, atol=1e-6)
        assert back.seg_classes == 5 and back.lmk_classes == 7
