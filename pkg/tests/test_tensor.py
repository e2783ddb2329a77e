import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from toolnet.layers import bilinear_kernel, upsample_padding
from toolnet.tensor import (
    ShapeError,
    Tensor,
    add,
    backward,
    concat_channels,
    conv2d,
    conv2d_direct,
    conv_transpose2d,
    dot,
    finite_diff_check,
    maxpool2d,
    scale,
    softmax_channels,
)

from conftest import conv_oracle, rand_tensor


class TestConv2d:
    def test_scalar_kernel_scales(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor([[[[2.0]]]]), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_full_window_sum(self):
        x = Tensor(np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3))
        out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 45.0

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
    def test_matches_loop_oracle(self, rng, stride, pad):
        x = rng.normal(size=(1, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad).data
        np.testing.assert_allclose(out, conv_oracle(x, k, b, stride, pad), atol=1e-12, rtol=0)
        np.testing.assert_allclose(out, conv2d_direct(x, k, b, stride, pad), atol=1e-12, rtol=0)

    def test_output_size(self, rng):
        out = conv2d(rand_tensor(rng, (2, 3, 11, 9)), rand_tensor(rng, (4, 3, 3, 3)), None, 2, 1)
        assert out.shape == (2, 4, (11 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError, match="channels"):
            conv2d(rand_tensor(rng, (1, 3, 4, 4)), rand_tensor(rng, (2, 2, 3, 3)))

    def test_kernel_larger_than_input(self, rng):
        with pytest.raises(ShapeError):
            conv2d(rand_tensor(rng, (1, 1, 2, 2)), rand_tensor(rng, (1, 1, 3, 3)))


class TestConvTranspose:
    def test_single_pixel_broadcast(self):
        out = conv_transpose2d(Tensor([[[[3.0]]]]), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0))

    def test_bilinear_preserves_constant_interior(self):
        c = 1.7
        out = conv_transpose2d(Tensor(np.full((1, 1, 2, 2), c)), Tensor(bilinear_kernel(2, 1)),
                               stride=2, pad=upsample_padding(2))
        assert out.shape == (1, 1, 4, 4)
        np.testing.assert_allclose(out.data[0, 0, 1:3, 1:3], c, rtol=0, atol=1e-15)

    def test_output_size(self, rng):
        out = conv_transpose2d(rand_tensor(rng, (1, 2, 5, 6)), rand_tensor(rng, (2, 3, 4, 4)), 2, 1)
        assert out.shape == (1, 3, (5 - 1) * 2 - 2 + 4, (6 - 1) * 2 - 2 + 4)

    def test_adjoint_identity_many(self, rng):
        for _ in range(100):
            stride = int(rng.integers(1, 4))
            k = int(rng.integers(stride, stride + 3))
            pad = int(rng.integers(0, k))
            ho, wo = (int(v) for v in rng.integers(1, 5, size=2))
            h, w = (ho - 1) * stride + k - 2 * pad, (wo - 1) * stride + k - 2 * pad
            if h < 1 or w < 1:
                continue
            cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
            x = rng.normal(size=(1, cin, h, w))
            kern = Tensor(rng.normal(size=(cout, cin, k, k)))
            y = rng.normal(size=(1, cout, ho, wo))
            lhs = np.sum(conv2d(Tensor(x), kern, None, stride, pad).data * y)
            rhs = np.sum(x * conv_transpose2d(Tensor(y), kern, stride, pad).data)
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_kernel_smaller_than_stride(self, rng):
        with pytest.raises(ShapeError):
            conv_transpose2d(rand_tensor(rng, (1, 1, 2, 2)), rand_tensor(rng, (1, 1, 1, 1)), stride=2)


class TestMaxpool:
    def test_simple(self):
        out = maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
        assert out.data.tolist() == [[[[4.0]]]]

    def test_constant(self):
        out = maxpool2d(Tensor(np.full((1, 2, 4, 4), 0.3)), 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 0.3))

    def test_matches_window_oracle(self, rng):
        x = rng.normal(size=(1, 3, 8, 8))
        out = maxpool2d(Tensor(x), 2, 2).data
        ref = np.empty((1, 3, 4, 4))
        for c in range(3):
            for i in range(4):
                for j in range(4):
                    ref[0, c, i, j] = max(x[0, c, 2 * i + u, 2 * j + v] for u in range(2) for v in range(2))
        np.testing.assert_array_equal(out, ref)

    def test_tie_routes_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        backward(dot(maxpool2d(x, 2, 2), Tensor(np.ones((1, 1, 1, 1)))))
        assert x.grad.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]

    def test_window_too_large(self, rng):
        with pytest.raises(ShapeError):
            maxpool2d(rand_tensor(rng, (1, 1, 1, 1)), 2, 2)


class TestElementwise:
    def test_softmax_symmetric(self):
        out = softmax_channels(Tensor(np.zeros((1, 2, 1, 1))))
        np.testing.assert_array_equal(out.data.ravel(), [0.5, 0.5])

    def test_softmax_analytic(self):
        out = softmax_channels(Tensor(np.array([np.log(3.0), 0.0]).reshape(1, 2, 1, 1)))
        np.testing.assert_allclose(out.data.ravel(), [0.75, 0.25], rtol=0, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 2 ** 31 - 1), st.floats(0.1, 50.0))
    def test_softmax_normalised(self, channels, seed, spread):
        x = np.random.default_rng(seed).normal(scale=spread, size=(1, channels, 4, 4))
        s = softmax_channels(Tensor(x)).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert np.all(s >= 0) and np.all(s <= 1)

    def test_softmax_open_interval_for_moderate_logits(self, rng):
        s = softmax_channels(Tensor(rng.normal(scale=5, size=(1, 3, 6, 6)))).data
        assert np.all(s > 0) and np.all(s < 1)

    def test_add_zero_is_identity(self, rng):
        x = rand_tensor(rng, (1, 2, 3, 3))
        out = add(x, Tensor(np.zeros(x.shape)))
        assert out.data.tobytes() == x.data.tobytes()

    def test_add_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            add(rand_tensor(rng, (1, 2, 3, 3)), rand_tensor(rng, (1, 2, 3, 4)))

    def test_concat(self, rng):
        a, b = rand_tensor(rng, (1, 2, 3, 3)), rand_tensor(rng, (1, 1, 3, 3))
        out = concat_channels([a, b])
        assert out.shape == (1, 3, 3, 3)
        np.testing.assert_array_equal(out.data[:, 2:], b.data)
        with pytest.raises(ShapeError):
            concat_channels([a, rand_tensor(rng, (1, 1, 2, 3))])


class TestBackward:
    def test_linear(self):
        x = Tensor([[[[3.0]]]], requires_grad=True)
        backward(scale(x, 2.0))
        assert x.grad.item() == 2.0

    def test_non_scalar_rejected(self, rng):
        with pytest.raises(ShapeError):
            backward(conv2d(rand_tensor(rng, (1, 1, 3, 3)), rand_tensor(rng, (2, 1, 1, 1))))

    def test_constant_loss_rejected(self):
        with pytest.raises(RuntimeError):
            backward(Tensor(np.zeros((1, 1, 1, 1))))

    def test_shared_subexpression_accumulates(self):
        x = Tensor([[[[2.0]]]], requires_grad=True)
        y = scale(x, 3.0)
        backward(add(y, y))
        assert x.grad.item() == 6.0

    def test_deep_chain_no_recursion_limit(self):
        x = Tensor([[[[1.0]]]], requires_grad=True)
        y = x
        for _ in range(5000):
            y = scale(y, 1.0)
        backward(y)
        assert x.grad.item() == 1.0

    def test_deterministic(self, rng):
        x = rng.normal(size=(1, 2, 8, 8))
        k = rng.normal(size=(3, 2, 3, 3))

        def run():
            kt = Tensor(k.copy(), requires_grad=True)
            h = maxpool2d(softmax_channels(conv2d(Tensor(x), kt, None, 1, 1)), 2, 2)
            backward(dot(h, Tensor(np.ones(h.shape))))
            return h.data.tobytes() + kt.grad.tobytes()

        assert run() == run()


class TestFiniteDiff:
    def test_linear_graph_is_exact(self, rng):
        x, k = rand_tensor(rng, (1, 2, 5, 5)), rand_tensor(rng, (3, 2, 3, 3))
        r = Tensor(rng.normal(size=(1, 3, 3, 3)))
        params = {"x": x, "k": k}
        for name in params:
            err = finite_diff_check(lambda: dot(conv2d(x, k), r), params, name, samples=None)
            assert err <= 1e-9

    def test_maxpool_ties_are_skipped(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        err = finite_diff_check(lambda: dot(maxpool2d(x, 2, 2), Tensor(np.ones((1, 1, 1, 1)))),
                                {"x": x}, "x", samples=None)
        assert err == 0.0

    def test_detects_wrong_gradient(self, rng):
        from toolnet.tensor import _result

        x = rand_tensor(rng, (1, 1, 2, 2))
        bad = lambda: dot(_result(x.data ** 2, (x,), lambda g: (g * x.data,), "bad"), Tensor(np.ones(x.shape)))
        assert finite_diff_check(bad, {"x": x}, "x", samples=None) > 1e-2

    def test_rejects_bad_eps(self, rng):
        x = rand_tensor(rng, (1, 1, 1, 1))
        with pytest.raises(ValueError):
            finite_diff_check(lambda: scale(x, 1.0), {"x": x}, "x", eps=0.0)


def test_float32_inference_mode(rng):
    x = Tensor(rng.normal(size=(1, 2, 6, 6)).astype(np.float32))
    k = Tensor(rng.normal(size=(2, 2, 3, 3)).astype(np.float32))
    out = softmax_channels(conv2d(x, k, None, 1, 1))
    assert out.dtype == np.float32
