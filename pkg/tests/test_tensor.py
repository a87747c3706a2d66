import numpy as np
import pytest

from dpcnn.tensor import (
    ConvKernel,
    ShapeError,
    avg_pool2,
    avg_pool2_backward,
    conv2d,
    conv2d_backward,
    depthwise_conv2d,
    depthwise_conv2d_backward,
    linear,
    linear_backward,
)
from oracles import (
    avg_pool2_reference,
    conv2d_reference,
    depthwise_conv2d_reference,
    linear_reference,
)


def rel_err(a, b, floor=1e-12):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / denom)


class TestConv2d:
    def test_identity_kernel_passes_input_through(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 6, 7))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = conv2d(x, ConvKernel(w, stride=1, padding=1))
        np.testing.assert_array_equal(out, x)

    def test_all_ones_4x4_summation(self):
        # frozen from the direct-summation oracle: a 3x3 ones kernel over a
        # padded 4x4 ones image sees 4 cells in corners, 6 on edges, 9 inside
        x = np.ones((1, 1, 4, 4))
        w = np.ones((1, 1, 3, 3))
        out = conv2d(x, ConvKernel(w, stride=1, padding=1))[0, 0]
        expected = np.array(
            [
                [4.0, 6.0, 6.0, 4.0],
                [6.0, 9.0, 9.0, 6.0],
                [6.0, 9.0, 9.0, 6.0],
                [4.0, 6.0, 6.0, 4.0],
            ]
        )
        np.testing.assert_array_equal(out, expected)
        np.testing.assert_allclose(out, conv2d_reference(x, w, 1, 1)[0, 0], rtol=1e-12)

    @pytest.mark.parametrize(
        "shape,kshape,stride,padding,dilation",
        [
            ((2, 3, 8, 9), (4, 3, 3, 3), 1, 1, 1),
            ((1, 2, 7, 7), (3, 2, 3, 3), 2, 1, 1),
            ((2, 1, 9, 9), (2, 1, 3, 3), 1, 2, 2),
            ((1, 4, 6, 6), (4, 4, 1, 1), 1, 0, 1),
            ((1, 2, 9, 9), (2, 2, 5, 5), 1, 2, 1),
        ],
    )
    def test_matches_direct_summation(self, shape, kshape, stride, padding, dilation):
        rng = np.random.default_rng(hash((shape, kshape)) % 2**32)
        x = rng.standard_normal(shape)
        w = rng.standard_normal(kshape)
        got = conv2d(x, ConvKernel(w, stride=stride, padding=padding, dilation=dilation))
        want = conv2d_reference(x, w, stride, padding, dilation)
        assert got.shape == want.shape
        assert rel_err(got, want) < 1e-12

    def test_output_extent_formula(self):
        x = np.zeros((1, 1, 11, 13))
        w = np.zeros((1, 1, 3, 3))
        out = conv2d(x, ConvKernel(w, stride=2, padding=1, dilation=2))
        oh = (11 + 2 - 2 * 2 - 1) // 2 + 1
        ow = (13 + 2 - 2 * 2 - 1) // 2 + 1
        assert out.shape == (1, 1, oh, ow)

    def test_channel_mismatch_names_both_shapes(self):
        x = np.zeros((1, 2, 4, 4))
        w = np.zeros((1, 3, 3, 3))
        with pytest.raises(ShapeError, match=r"2 channels.*expects\s+3"):
            conv2d(x, ConvKernel(w, padding=1))

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 2, 5, 5))
        y = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        k = ConvKernel(w, stride=1, padding=1)
        a, b = 1.7, -0.4
        lhs = conv2d(a * x + b * y, k)
        rhs = a * conv2d(x, k) + b * conv2d(y, k)
        assert rel_err(lhs, rhs, floor=1e-6) < 1e-6

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((2, 2, 3, 3))
        k = ConvKernel(w, stride=1, padding=1)
        g = rng.standard_normal(conv2d(x, k).shape)
        gx, gw = conv2d_backward(g, x, k)
        h = 1e-4
        for arr, grad in ((x, gx), (w, gw)):
            flat = arr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = float(np.sum(conv2d(x, ConvKernel(w, 1, 1)) * g))
                flat[i] = orig - h
                lm = float(np.sum(conv2d(x, ConvKernel(w, 1, 1)) * g))
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                an = grad.reshape(-1)[i]
                assert abs(an - fd) / max(abs(an), abs(fd), 1e-6) < 1e-6

    def test_adjoint_identity(self):
        # <g, A x> == <A^T g, x> and <g, A x> == <grad_w, w> for linear maps
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        k = ConvKernel(w, stride=1, padding=1)
        out = conv2d(x, k)
        g = rng.standard_normal(out.shape)
        gx, gw = conv2d_backward(g, x, k)
        lhs = float(np.sum(g * out))
        assert abs(lhs - float(np.sum(gx * x))) < 1e-9 * abs(lhs) + 1e-9
        assert abs(lhs - float(np.sum(gw * w))) < 1e-9 * abs(lhs) + 1e-9

    def test_grad_without_input_grad(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 1, 4, 4))
        k = ConvKernel(rng.standard_normal((2, 1, 3, 3)), padding=1)
        g = rng.standard_normal((1, 2, 4, 4))
        gx, gw = conv2d_backward(g, x, k, need_x=False)
        assert gx is None and gw.shape == (2, 1, 3, 3)

    def test_deterministic_repeat(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((3, 4, 10, 10)).astype(np.float32)
        k = ConvKernel(rng.standard_normal((4, 4, 3, 3)).astype(np.float32), padding=1)
        a = conv2d(x, k)
        b = conv2d(x, k)
        assert np.array_equal(a, b)


class TestDepthwise:
    @pytest.mark.parametrize("padding,dilation,ksize", [(1, 1, 3), (2, 2, 3), (2, 1, 5), (0, 1, 1)])
    def test_matches_direct_summation(self, padding, dilation, ksize):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((3, 1, ksize, ksize))
        got = depthwise_conv2d(x, w, padding=padding, dilation=dilation)
        want = depthwise_conv2d_reference(x, w, padding, dilation)
        assert rel_err(got, want) < 1e-12

    def test_adjoints(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((2, 1, 3, 3))
        out = depthwise_conv2d(x, w, padding=1)
        g = rng.standard_normal(out.shape)
        gx, gw = depthwise_conv2d_backward(g, x, w, padding=1)
        lhs = float(np.sum(g * out))
        assert abs(lhs - float(np.sum(gx * x))) < 1e-9 * abs(lhs) + 1e-9
        assert abs(lhs - float(np.sum(gw * w))) < 1e-9 * abs(lhs) + 1e-9


class TestAvgPool:
    def test_single_window_mean(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        assert avg_pool2(x)[0, 0, 0, 0] == 2.5

    def test_constant_input(self):
        x = np.full((2, 3, 4, 6), 0.7)
        np.testing.assert_allclose(avg_pool2(x), np.full((2, 3, 2, 3), 0.7), rtol=1e-12)

    def test_matches_reference(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 2, 6, 8))
        np.testing.assert_allclose(avg_pool2(x), avg_pool2_reference(x), rtol=1e-12)

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            avg_pool2(np.zeros((1, 1, 5, 4)))

    def test_backward_distributes_quarter(self):
        g = np.zeros((1, 1, 2, 2))
        g[0, 0, 1, 0] = 2.0
        gx = avg_pool2_backward(g, (1, 1, 4, 4))
        expected = np.zeros((1, 1, 4, 4))
        expected[0, 0, 2:4, 0:2] = 0.5
        np.testing.assert_array_equal(gx, expected)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((1, 1, 4, 4))
        g = rng.standard_normal((1, 1, 2, 2))
        gx = avg_pool2_backward(g, x.shape)
        h = 1e-4
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(np.sum(avg_pool2(x) * g))
            flat[i] = orig - h
            lm = float(np.sum(avg_pool2(x) * g))
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            an = gx.reshape(-1)[i]
            assert abs(an - fd) / max(abs(an), abs(fd), 1e-6) < 1e-6


class TestLinear:
    def test_identity(self):
        x = np.random.default_rng(12).standard_normal((3, 4))
        np.testing.assert_array_equal(linear(x, np.eye(4)), x)

    def test_zero_map(self):
        x = np.ones((2, 5))
        np.testing.assert_array_equal(linear(x, np.zeros((3, 5))), np.zeros((2, 3)))

    def test_matches_double_loop(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((2, 4))
        w = rng.standard_normal((3, 4))
        np.testing.assert_allclose(linear(x, w), linear_reference(x, w), rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError, match="inner dimensions"):
            linear(np.zeros((2, 4)), np.zeros((3, 5)))

    def test_adjoints(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((2, 4))
        g = rng.standard_normal((3, 2))
        gx, gw = linear_backward(g, x, w)
        lhs = float(np.sum(g * linear(x, w)))
        assert abs(lhs - float(np.sum(gx * x))) < 1e-12 + 1e-9 * abs(lhs)
        assert abs(lhs - float(np.sum(gw * w))) < 1e-12 + 1e-9 * abs(lhs)

    def test_dtype_preserved(self):
        x = np.ones((2, 3), dtype=np.float32)
        w = np.ones((2, 3), dtype=np.float32)
        assert linear(x, w).dtype == np.float32
