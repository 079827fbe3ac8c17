import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gwcosal.ops import (
    ConvParams,
    ShapeError,
    concat_channels,
    conv2d,
    conv2d_grad,
    deconv2d,
    deconv2d_grad,
    deconv_out_size,
    make_bilinear_kernel,
    maxpool2,
    maxpool2_grad,
    relu,
    relu_grad,
    sgd_update,
    split_channels,
)


def naive_conv(x, w, b, stride, pad):
    """Direct six-loop convolution, independent of the im2col path."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = b[oi]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[ni, ci, i * stride + u, j * stride + v] * w[oi, ci, u, v]
                    y[ni, oi, i, j] = acc
    return y


def naive_deconv(x, w, b, stride, pad):
    """Scatter form of the transposed convolution."""
    n, a, h, wd = x.shape
    _, bc, kh, kw = w.shape
    full = np.zeros((n, bc, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for ni in range(n):
        for ai in range(a):
            for i in range(h):
                for j in range(wd):
                    full[ni, :, i * stride : i * stride + kh, j * stride : j * stride + kw] += x[ni, ai, i, j] * w[ai]
    oh, ow = full.shape[2] - 2 * pad, full.shape[3] - 2 * pad
    return full[:, :, pad : pad + oh, pad : pad + ow] + b[None, :, None, None]


# ------------------------------------------------------------- conv2d


def test_conv_all_ones_kernel_example():
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    y, _ = conv2d(x, ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1))
    np.testing.assert_array_equal(y[0, 0], [[12, 21, 16], [27, 45, 33], [24, 39, 28]])


def test_conv_identity_kernel_returns_input():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 7))
    y, _ = conv2d(x, ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1)))
    np.testing.assert_array_equal(y, x)


def test_conv_matches_naive_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    y, _ = conv2d(x, ConvParams(w, b, 1, 1))
    np.testing.assert_allclose(y, naive_conv(x, w, b, 1, 1), rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 2), st.integers(0, 1),
    st.integers(3, 7), st.integers(3, 7), st.integers(0, 2**31 - 1),
)
def test_conv_matches_naive_oracle_property(c, o, k, stride, pad, h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, c, h, w))
    wt = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal(o)
    y, _ = conv2d(x, ConvParams(wt, b, stride, pad))
    np.testing.assert_allclose(y, naive_conv(x, wt, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 2, 4, 4)), ConvParams(np.zeros((1, 3, 3, 3)), np.zeros(1)))


def test_conv_rejects_empty_output():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 1, 2, 2)), ConvParams(np.zeros((1, 1, 3, 3)), np.zeros(1)))


def test_conv_grad_zero_dy_is_zero():
    rng = np.random.default_rng(2)
    y, ctx = conv2d(rng.standard_normal((1, 2, 5, 5)), ConvParams(rng.standard_normal((3, 2, 3, 3)), np.ones(3), 1, 1))
    for g in conv2d_grad(ctx, np.zeros_like(y)):
        assert not g.any()


def test_conv_grad_identity_kernel_passes_dy_through():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 1, 4, 4))
    y, ctx = conv2d(x, ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1)))
    dy = rng.standard_normal(y.shape)
    np.testing.assert_array_equal(conv2d_grad(ctx, dy)[0], dy)


def test_conv_grad_rejects_wrong_dy_shape():
    _, ctx = conv2d(np.zeros((1, 1, 4, 4)), ConvParams(np.zeros((1, 1, 3, 3)), np.zeros(1)))
    with pytest.raises(ShapeError):
        conv2d_grad(ctx, np.zeros((1, 1, 4, 4)))


def test_conv_grad_is_linear_in_dy():
    rng = np.random.default_rng(4)
    y, ctx = conv2d(rng.standard_normal((1, 2, 5, 5)), ConvParams(rng.standard_normal((3, 2, 3, 3)), np.zeros(3), 2, 1))
    a, b = rng.standard_normal(y.shape), rng.standard_normal(y.shape)
    for ga, gb, gab in zip(conv2d_grad(ctx, a), conv2d_grad(ctx, b), conv2d_grad(ctx, 2 * a - b)):
        np.testing.assert_allclose(gab, 2 * ga - gb, atol=1e-12)


# ------------------------------------------------------------- deconv2d


def test_deconv_matches_scatter_oracle():
    rng = np.random.default_rng(5)
    for stride, k, pad in [(1, 3, 1), (2, 4, 1), (3, 5, 2), (2, 2, 0)]:
        x = rng.standard_normal((2, 3, 4, 5))
        w = rng.standard_normal((3, 2, k, k))
        b = rng.standard_normal(2)
        y, _ = deconv2d(x, ConvParams(w, b, stride, pad))
        np.testing.assert_allclose(y, naive_deconv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_deconv_output_size_formula():
    assert deconv_out_size(16, 16, 8, 4) == 128
    y, _ = deconv2d(np.zeros((1, 1, 3, 4)), ConvParams(np.zeros((1, 1, 4, 4)), np.zeros(1), 2, 1))
    assert y.shape == (1, 1, 6, 8)


def test_deconv_is_adjoint_of_conv():
    rng = np.random.default_rng(6)
    for _ in range(20):
        stride = int(rng.integers(1, 4))
        k = stride + int(rng.integers(0, 3))
        pad = int(rng.integers(0, k // 2 + 1))
        hu, wu = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        a, b = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        w = rng.standard_normal((a, b, k, k))
        p = ConvParams(w, np.zeros(a), stride, pad)
        q = ConvParams(w, np.zeros(b), stride, pad)
        u = rng.standard_normal((1, a, hu, wu))
        dx, _ = deconv2d(u, q)
        x = rng.standard_normal(dx.shape)
        cx, _ = conv2d(x, p)
        assert cx.shape == u.shape
        lhs, rhs = np.sum(cx * u), np.sum(x * dx)
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs), 1.0)


def test_deconv_rejects_kernel_smaller_than_stride():
    with pytest.raises(ValueError, match="smaller than stride"):
        deconv2d(np.zeros((1, 1, 2, 2)), ConvParams(np.zeros((1, 1, 2, 2)), np.zeros(1), 3, 0))


def test_deconv_rejects_nonpositive_output():
    with pytest.raises(ShapeError):
        deconv2d(np.zeros((1, 1, 1, 1)), ConvParams(np.zeros((1, 1, 2, 2)), np.zeros(1), 2, 1))


def test_deconv_grad_shapes():
    rng = np.random.default_rng(7)
    y, ctx = deconv2d(rng.standard_normal((2, 3, 4, 4)), ConvParams(rng.standard_normal((3, 2, 4, 4)), np.zeros(2), 2, 1))
    dx, dw, db = deconv2d_grad(ctx, np.ones_like(y))
    assert dx.shape == (2, 3, 4, 4) and dw.shape == (3, 2, 4, 4) and db.shape == (2,)
    np.testing.assert_allclose(db, [y[:, 0].size, y[:, 1].size])


# ------------------------------------------------------------- bilinear kernel


def test_bilinear_factor2_profile():
    k = make_bilinear_kernel(2, 1, dtype=np.float64)
    profile = np.array([0.25, 0.75, 0.75, 0.25])
    np.testing.assert_allclose(k[0, 0], np.outer(profile, profile), rtol=0, atol=1e-15)


def test_bilinear_factor1_is_identity():
    np.testing.assert_array_equal(make_bilinear_kernel(1, 1, dtype=np.float64), np.ones((1, 1, 1, 1)))


@pytest.mark.parametrize("factor", [2, 3, 4, 8, 16])
def test_bilinear_kernel_formula(factor):
    k = make_bilinear_kernel(factor, 3, dtype=np.float64)
    size = 2 * factor - factor % 2
    center = (2 * factor - 1 - factor % 2) / (2 * factor)
    prof = np.array([1 - abs(i / factor - center) for i in range(size)])
    assert k.shape == (3, 3, size, size)
    for a in range(3):
        for b in range(3):
            expected = np.outer(prof, prof) if a == b else np.zeros((size, size))
            np.testing.assert_allclose(k[a, b], expected, atol=1e-15)


@pytest.mark.parametrize("factor", [2, 4, 8])
def test_bilinear_upsampling_preserves_constants(factor):
    c = 0.37
    w = make_bilinear_kernel(factor, 1, dtype=np.float64)
    y, _ = deconv2d(np.full((1, 1, 6, 7), c), ConvParams(w, np.zeros(1), factor, factor // 2))
    assert y.shape == (1, 1, 6 * factor, 7 * factor)
    interior = y[0, 0, factor:-factor, factor:-factor]
    np.testing.assert_allclose(interior, c, atol=1e-12)


# ------------------------------------------------------------- relu / pool


def test_relu_definition():
    y, mask = relu(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(y, [0, 0, 2])
    np.testing.assert_array_equal(relu_grad(mask, np.ones(3)), [0, 0, 1])


def test_relu_identity_on_positive():
    x = np.random.default_rng(8).uniform(0.1, 2.0, (3, 4))
    np.testing.assert_array_equal(relu(x)[0], x)


def test_maxpool_definition():
    y, _ = maxpool2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    np.testing.assert_array_equal(y, [[[[4.0]]]])


def test_maxpool_constant_map():
    y, _ = maxpool2(np.full((1, 2, 6, 4), 1.5))
    np.testing.assert_array_equal(y, np.full((1, 2, 3, 2), 1.5))


def test_maxpool_ties_route_to_first_in_row_major_order():
    y, ctx = maxpool2(np.ones((1, 1, 2, 2)))
    dx = maxpool2_grad(ctx, np.ones_like(y))
    np.testing.assert_array_equal(dx[0, 0], [[1, 0], [0, 0]])


def test_maxpool_rejects_odd_dims():
    with pytest.raises(ShapeError):
        maxpool2(np.zeros((1, 1, 3, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_maxpool_matches_loop_oracle(c, hh, hw, seed):
    x = np.random.default_rng(seed).integers(0, 4, (1, c, 2 * hh, 2 * hw)).astype(np.float64)
    y, ctx = maxpool2(x)
    dy = np.arange(1.0, y.size + 1).reshape(y.shape)
    dx = maxpool2_grad(ctx, dy)
    ref_dx = np.zeros_like(x)
    for ci in range(c):
        for i in range(hh):
            for j in range(hw):
                win = x[0, ci, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                assert y[0, ci, i, j] == win.max()
                u, v = divmod(int(np.argmax(win)), 2)
                ref_dx[0, ci, 2 * i + u, 2 * j + v] = dy[0, ci, i, j]
    np.testing.assert_array_equal(dx, ref_dx)


# ------------------------------------------------------------- concat / split


def test_concat_split_roundtrip_bit_exact():
    rng = np.random.default_rng(9)
    xs = [rng.standard_normal((2, c, 3, 4)) for c in (1, 3, 2)]
    back = split_channels(concat_channels(xs), [1, 3, 2])
    for a, b in zip(xs, back):
        np.testing.assert_array_equal(a, b)


def test_concat_single_element_is_identity():
    x = np.random.default_rng(10).standard_normal((1, 2, 3, 3))
    np.testing.assert_array_equal(concat_channels([x]), x)


def test_concat_channel_order_in_memory():
    a = np.full((1, 1, 2, 2), 1.0)
    b = np.full((1, 1, 2, 2), 2.0)
    np.testing.assert_array_equal(concat_channels([a, b]).ravel(), [1, 1, 1, 1, 2, 2, 2, 2])


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels([np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3))])


# ------------------------------------------------------------- sgd


def test_sgd_two_steps_by_hand():
    p, v = np.array([1.0]), np.array([0.0])
    p, v = sgd_update(p, np.array([1.0]), v, lr=0.1, momentum=0.99, weight_decay=0.0)
    np.testing.assert_allclose([p[0], v[0]], [0.9, 1.0], rtol=0, atol=1e-15)
    p, v = sgd_update(p, np.array([1.0]), v, lr=0.1, momentum=0.99, weight_decay=0.0)
    np.testing.assert_allclose([p[0], v[0]], [0.701, 1.99], rtol=0, atol=1e-15)


def test_sgd_zero_lr_accumulates_velocity_only():
    p, v = sgd_update(np.array([2.0]), np.array([1.0]), np.array([0.5]), lr=0.0, momentum=0.9, weight_decay=0.1)
    assert p[0] == 2.0
    np.testing.assert_allclose(v, [0.9 * 0.5 + 1.0 + 0.1 * 2.0])


def test_sgd_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        sgd_update(np.array([1.0]), np.array([np.nan]), np.array([0.0]), 0.1, 0.9, 0.0)
