import numpy as np
import pytest

from toolnet.layers import DropoutState, bilinear_kernel, dropout, he_init, prelu, upsample_padding
from toolnet.tensor import ShapeError, Tensor, conv_transpose2d, dot, finite_diff_check


def _prelu1(x, a):
    return prelu(Tensor(np.full((1, 1, 1, 1), x)), Tensor([a])).item()


def test_prelu_positive_passthrough():
    assert _prelu1(2.0, 0.25) == 2.0


def test_prelu_negative_slope():
    assert _prelu1(-2.0, 0.25) == -0.5


def test_prelu_zero_slope_is_relu(rng):
    for _ in range(100):
        x = rng.normal(size=(1, 3, 4, 4))
        out = prelu(Tensor(x), Tensor(np.zeros(3))).data
        np.testing.assert_array_equal(out, np.maximum(x, 0))


def test_prelu_continuous_at_zero(rng):
    for a in rng.normal(size=10):
        assert _prelu1(0.0, a) == 0.0


def test_prelu_slope_gradient_sums_negative_part(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    a = Tensor(np.full(3, 0.25), requires_grad=True)
    dot(prelu(x, a), Tensor(np.ones(x.shape))).backward()
    np.testing.assert_allclose(a.grad, np.minimum(x.data, 0).sum(axis=(0, 2, 3)), rtol=1e-14)


def test_prelu_gradients_finite_diff(rng):
    x = Tensor(rng.normal(size=(1, 3, 5, 5)), requires_grad=True)
    a = Tensor(rng.uniform(0, 0.5, size=3), requires_grad=True)
    r = Tensor(rng.normal(size=x.shape))
    params = {"x": x, "a": a}
    for name in params:
        assert finite_diff_check(lambda: dot(prelu(x, a), r), params, name, samples=None) < 1e-4


def test_prelu_length_mismatch(rng):
    with pytest.raises(ShapeError):
        prelu(Tensor(rng.normal(size=(1, 3, 2, 2))), Tensor(np.zeros(2)))


class TestDropout:
    def test_eval_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 5, 5)))
        assert dropout(x, DropoutState(0.5, training=False)) is x

    def test_p_zero_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 5, 5)))
        assert dropout(x, DropoutState(0.0, training=True)).data.tobytes() == x.data.tobytes()

    def test_statistics(self):
        x = Tensor(np.ones((1, 1, 1000, 1000)))
        out = dropout(x, DropoutState(0.5, training=True, name="t", seed=3)).data
        assert abs(out.mean() - 1.0) < 0.01
        assert abs(np.mean(out == 0) - 0.5) < 0.01
        assert set(np.unique(out)) == {0.0, 2.0}

    def test_p_one_rejected_in_training(self):
        with pytest.raises(ValueError):
            dropout(Tensor(np.ones((1, 1, 2, 2))), DropoutState(1.0, training=True))

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            DropoutState(1.5)

    def test_stream_reproducible_and_iteration_dependent(self):
        x = Tensor(np.ones((1, 2, 8, 8)))
        st = DropoutState(0.5, training=True, name="enc6.dropout", seed=11)
        a = dropout(x, st, iteration=4).data
        b = dropout(x, st, iteration=4).data
        c = dropout(x, st, iteration=5).data
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != c.tobytes()


class TestInit:
    def test_he_variance(self):
        w = he_init((100000 // 9 + 1, 1, 3, 3), np.random.default_rng(0))
        assert abs(w.var() / (2 / 9) - 1) < 0.05
        assert abs(w.mean()) < 0.01

    def test_bilinear_factor_one_is_identity(self):
        np.testing.assert_array_equal(bilinear_kernel(1, 1), [[[[1.0]]]])

    def test_bilinear_factor_two_profile(self):
        k = bilinear_kernel(2, 2)
        assert k.shape == (2, 2, 4, 4)
        assert set(np.round(k[0, 0].ravel() * 16).astype(int)) == {1, 3, 9}
        assert not k[0, 1].any() and not k[1, 0].any()

    @pytest.mark.parametrize("factor", [2, 3, 4, 8, 32])
    def test_bilinear_constant_preservation(self, factor):
        x = np.full((1, 2, 6, 6), 0.8)
        out = conv_transpose2d(Tensor(x), Tensor(bilinear_kernel(factor, 2)), factor, upsample_padding(factor)).data
        assert out.shape == (1, 2, 6 * factor, 6 * factor)
        border = factor
        np.testing.assert_allclose(out[:, :, border:-border, border:-border], 0.8, rtol=0, atol=1e-12)
