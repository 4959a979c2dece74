"""Layer-level contracts: shapes, trivial identities, and gradient checks.

All gradient checks run the layers in 64-bit arithmetic against central
finite differences with step 1e-3.
"""

import numpy as np
import pytest

from capcnn.errors import (
    CorruptedStateError,
    DimensionError,
    InvalidBatchError,
)
from capcnn.layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    MaxPool2x2,
    ReLU,
    softmax,
    softmax_cross_entropy,
    softmax_cross_entropy_batch,
)

from _util import finite_difference, max_rel_err, random_projection_loss

GRAD_TOL = 1e-4


def rng64(seed=0):
    return np.random.default_rng(seed)


class TestConv2D:
    def test_output_shape_matches_first_block(self):
        conv = Conv2D(1, 2, rng=rng64(1))
        out = conv.forward(np.zeros((1, 120, 64, 1), np.float32))
        assert out.shape == (1, 120, 64, 2)

    def test_zero_kernels_give_zero_output(self):
        conv = Conv2D(2, 3)  # no rng: zero kernels and biases
        x = rng64(2).standard_normal((2, 6, 4, 2)).astype(np.float32)
        assert not conv.forward(x).any()

    def test_matches_naive_cross_correlation(self):
        conv = Conv2D(2, 3, rng=rng64(3), dtype=np.float64)
        x = rng64(4).standard_normal((1, 5, 4, 2))
        out = conv.forward(x)
        k = conv.params["kernels"]
        xp = np.pad(x[0], ((1, 1), (1, 1), (0, 0)))
        for i in range(5):
            for j in range(4):
                patch = xp[i : i + 3, j : j + 3, :]
                want = np.tensordot(patch, k, axes=3) + conv.params["biases"]
                np.testing.assert_allclose(out[0, i, j], want, rtol=1e-12)

    def test_channel_mismatch_raises(self):
        conv = Conv2D(2, 3, rng=rng64(0))
        with pytest.raises(DimensionError):
            conv.forward(np.zeros((1, 4, 4, 1), np.float32))

    def test_zero_sized_input_raises(self):
        conv = Conv2D(1, 2, rng=rng64(0))
        with pytest.raises(DimensionError):
            conv.forward(np.zeros((1, 0, 4, 1), np.float32))

    def test_gradients_match_finite_differences(self):
        rng = rng64(5)
        conv = Conv2D(2, 3, rng=rng, dtype=np.float64)
        x = rng.standard_normal((2, 6, 4, 2))
        project, upstream = random_projection_loss(rng, (2, 6, 4, 3))

        def loss():
            return project(conv.forward(x))

        conv.forward(x)
        dx = conv.backward(upstream)
        assert max_rel_err(dx, finite_difference(loss, x)) < GRAD_TOL
        assert (
            max_rel_err(conv.grads["kernels"],
                        finite_difference(loss, conv.params["kernels"]))
            < GRAD_TOL
        )
        assert (
            max_rel_err(conv.grads["biases"],
                        finite_difference(loss, conv.params["biases"]))
            < GRAD_TOL
        )


class TestBatchNorm:
    def test_training_normalizes_batch(self):
        rng = rng64(1)
        bn = BatchNorm(3, dtype=np.float64)
        x = rng.standard_normal((4, 5, 2, 3)) * 2.0 + 5.0
        out = bn.forward(x, training=True)
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1.0, atol=1e-3)

    def test_gamma_beta_rescale_standardized_input(self):
        rng = rng64(2)
        bn = BatchNorm(2, dtype=np.float64)
        bn.params["gamma"][:] = 2.0
        bn.params["beta"][:] = 3.0
        x = rng.standard_normal((6, 4, 4, 2))
        x = (x - x.mean(axis=(0, 1, 2))) / x.std(axis=(0, 1, 2))
        out = bn.forward(x, training=True)
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 3.0, atol=1e-6)
        np.testing.assert_allclose(out.std(axis=(0, 1, 2)), 2.0, atol=1e-4)

    def test_inference_with_batch_stats_reproduces_training(self):
        rng = rng64(3)
        bn = BatchNorm(2, dtype=np.float64)
        x = rng.standard_normal((3, 4, 2, 2)) * 1.5 + 0.7
        trained = bn.forward(x, training=True)
        bn.running_mean = x.mean(axis=(0, 1, 2))
        bn.running_var = x.var(axis=(0, 1, 2))
        inferred = bn.forward(x, training=False)
        np.testing.assert_allclose(inferred, trained, atol=1e-5)

    def test_running_statistics_blend(self):
        bn = BatchNorm(1, momentum=0.1, dtype=np.float64)
        x = np.full((2, 1, 1, 1), 4.0)
        bn.forward(x, training=True)
        np.testing.assert_allclose(bn.running_mean, 0.9 * 0.0 + 0.1 * 4.0)
        np.testing.assert_allclose(bn.running_var, 0.9 * 1.0 + 0.1 * 0.0)

    def test_small_batch_raises_in_training(self):
        bn = BatchNorm(1)
        with pytest.raises(InvalidBatchError):
            bn.forward(np.zeros((1, 2, 2, 1), np.float32), training=True)

    def test_negative_running_variance_raises(self):
        bn = BatchNorm(1)
        bn.running_var[:] = -1.0
        with pytest.raises(CorruptedStateError):
            bn.forward(np.zeros((2, 2, 2, 1), np.float32), training=False)

    def test_gradients_match_finite_differences(self):
        rng = rng64(4)
        bn = BatchNorm(2, dtype=np.float64)
        bn.params["gamma"][:] = rng.uniform(0.5, 1.5, size=2)
        bn.params["beta"][:] = rng.uniform(-0.5, 0.5, size=2)
        x = rng.standard_normal((3, 4, 2, 2))
        project, upstream = random_projection_loss(rng, (3, 4, 2, 2))

        def loss():
            return project(bn.forward(x, training=True))

        bn.forward(x, training=True)
        dx = bn.backward(upstream)
        assert max_rel_err(dx, finite_difference(loss, x)) < GRAD_TOL
        for pname in ("gamma", "beta"):
            assert (
                max_rel_err(bn.grads[pname],
                            finite_difference(loss, bn.params[pname]))
                < GRAD_TOL
            )


class TestReLU:
    def test_elementwise_max(self):
        relu = ReLU()
        out = relu.forward(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])

    def test_all_negative_blocks_everything(self):
        relu = ReLU()
        x = -np.abs(rng64(1).standard_normal((2, 3, 3, 1))) - 0.1
        assert not relu.forward(x).any()
        assert not relu.backward(np.ones_like(x)).any()

    def test_gradient_away_from_zero(self):
        rng = rng64(2)
        relu = ReLU()
        # Keep every entry at least 0.1 away from the kink.
        x = rng.standard_normal((4, 8))
        x = np.where(np.abs(x) < 0.1, x + 0.2, x)
        project, upstream = random_projection_loss(rng, (4, 8))

        def loss():
            return project(relu.forward(x))

        relu.forward(x)
        dx = relu.backward(upstream)
        assert max_rel_err(dx, finite_difference(loss, x)) < GRAD_TOL


class TestMaxPool:
    def test_shape_halves(self):
        pool = MaxPool2x2()
        out = pool.forward(np.zeros((1, 120, 64, 2), np.float32))
        assert out.shape == (1, 60, 32, 2)

    def test_window_maximum(self):
        pool = MaxPool2x2()
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        assert pool.forward(x)[0, 0, 0, 0] == 4.0

    def test_odd_dimension_raises(self):
        pool = MaxPool2x2()
        with pytest.raises(DimensionError):
            pool.forward(np.zeros((1, 5, 4, 1), np.float32))

    def test_constant_input_and_gradient_conservation(self):
        pool = MaxPool2x2()
        x = np.full((2, 4, 6, 3), 7.0)
        out = pool.forward(x)
        assert (out == 7.0).all()
        upstream = rng64(3).standard_normal(out.shape)
        dx = pool.backward(upstream)
        # One receiving cell per window; every upstream value routed
        # exactly once, unchanged.
        assert np.count_nonzero(dx) == upstream.size
        np.testing.assert_array_equal(
            np.sort(dx[dx != 0.0]), np.sort(upstream.reshape(-1))
        )

    def test_tie_goes_to_first_in_scan_order(self):
        pool = MaxPool2x2()
        x = np.full((1, 2, 2, 1), 5.0)
        pool.forward(x)
        dx = pool.backward(np.ones((1, 1, 1, 1)))
        assert dx[0, 0, 0, 0] == 1.0 and dx.sum() == 1.0

    def test_gradient_matches_finite_differences(self):
        rng = rng64(4)
        pool = MaxPool2x2()
        # Well-separated values so the step cannot flip a window maximum.
        x = rng.permutation(48).astype(np.float64).reshape(2, 4, 6, 1) * 0.1
        project, upstream = random_projection_loss(rng, (2, 2, 3, 1))

        def loss():
            return project(pool.forward(x))

        pool.forward(x)
        dx = pool.backward(upstream)
        assert max_rel_err(dx, finite_difference(loss, x)) < GRAD_TOL


class TestDropout:
    def test_inference_is_bit_exact_identity(self):
        drop = Dropout(0.5)
        x = rng64(1).standard_normal((3, 4)).astype(np.float32)
        out = drop.forward(x, training=False)
        assert out is x

    def test_all_keep_mask_doubles_values(self):
        drop = Dropout(0.5)
        x = np.ones((2, 2), np.float64)
        for seed in range(1000):
            out = drop.forward(x, training=True, rng=np.random.default_rng(seed))
            if drop.mask.all():
                np.testing.assert_array_equal(out, 2.0 * x)
                return
        pytest.fail("no all-keep mask found in 1000 seeds")

    def test_bad_rate_raises(self):
        with pytest.raises(ValueError):
            Dropout(1.0)
        with pytest.raises(ValueError):
            Dropout(-0.1)

    def test_monte_carlo_unbiasedness(self):
        drop = Dropout(0.5)
        rng = np.random.default_rng(7)
        x = np.ones((4, 4, 2), np.float64)
        total = np.zeros_like(x)
        n = 10_000
        for _ in range(n):
            total += drop.forward(x, training=True, rng=rng)
        mean = total / n
        assert mean.min() >= 0.95 and mean.max() <= 1.05

    def test_backward_applies_same_mask_and_scale(self):
        drop = Dropout(0.5)
        x = rng64(2).standard_normal((5, 5))
        out = drop.forward(x, training=True, rng=np.random.default_rng(3))
        dx = drop.backward(np.ones_like(x))
        np.testing.assert_array_equal(dx != 0.0, out != 0.0)
        assert set(np.unique(dx)) <= {0.0, 2.0}


class TestDense:
    def test_width_preserved_at_full_size(self):
        dense = Dense(3840, 3840, rng=rng64(1))
        out = dense.forward(np.zeros((1, 3840), np.float32))
        assert out.shape == (1, 3840)

    def test_zero_weights_output_biases(self):
        dense = Dense(4, 3)
        dense.params["biases"][:] = [1.0, 2.0, 3.0]
        out = dense.forward(rng64(2).standard_normal((2, 4)).astype(np.float32))
        np.testing.assert_allclose(out, [[1, 2, 3], [1, 2, 3]])

    def test_length_mismatch_raises(self):
        dense = Dense(4, 3)
        with pytest.raises(DimensionError):
            dense.forward(np.zeros((2, 5), np.float32))

    def test_gradients_match_finite_differences(self):
        rng = rng64(3)
        dense = Dense(8, 5, rng=rng, dtype=np.float64)
        x = rng.standard_normal((3, 8))
        project, upstream = random_projection_loss(rng, (3, 5))

        def loss():
            return project(dense.forward(x))

        dense.forward(x)
        dx = dense.backward(upstream)
        assert max_rel_err(dx, finite_difference(loss, x)) < GRAD_TOL
        assert (
            max_rel_err(dense.grads["weights"],
                        finite_difference(loss, dense.params["weights"]))
            < GRAD_TOL
        )
        assert (
            max_rel_err(dense.grads["biases"],
                        finite_difference(loss, dense.params["biases"]))
            < GRAD_TOL
        )


class TestSoftmaxCrossEntropy:
    def test_uniform_two_class_loss_is_ln2(self):
        loss, _ = softmax_cross_entropy(np.zeros(2), 0)
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)

    def test_saturated_correct_class(self):
        loss, _ = softmax_cross_entropy(np.array([100.0, 0.0]), 0)
        assert loss < 1e-6

    def test_l2_term_is_added(self):
        loss, _ = softmax_cross_entropy(np.zeros(2), 0, l2_term=0.25)
        assert loss == pytest.approx(np.log(2.0) + 0.25, abs=1e-12)

    def test_label_out_of_range_raises(self):
        with pytest.raises(IndexError):
            softmax_cross_entropy(np.zeros(3), 3)

    def test_probabilities_sum_to_one(self):
        rng = rng64(5)
        for _ in range(100):
            logits = rng.uniform(-50, 50, size=rng.integers(2, 8))
            assert abs(softmax(logits).sum() - 1.0) < 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = rng64(6)
        logits = rng.standard_normal(3)
        _, grad = softmax_cross_entropy(logits, 1)

        def loss():
            return softmax_cross_entropy(logits, 1)[0]

        assert max_rel_err(grad, finite_difference(loss, logits)) < GRAD_TOL

    def test_batch_gradient_is_mean_reduced(self):
        rng = rng64(7)
        logits = rng.standard_normal((4, 3))
        labels = np.array([0, 1, 2, 1])
        loss, grad = softmax_cross_entropy_batch(logits.copy(), labels)
        per = [softmax_cross_entropy(logits[i], labels[i]) for i in range(4)]
        assert loss == pytest.approx(np.mean([p[0] for p in per]), rel=1e-12)
        np.testing.assert_allclose(grad, np.stack([p[1] for p in per]) / 4, rtol=1e-12)
