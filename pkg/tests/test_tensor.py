import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from deformproto.tensor import (
    ConvLayer, check_tensor4, conv2d_backward, conv2d_forward, finite_difference_gradient, relu,
    relu_backward, sgd_step,
)


def naive_conv(x, w, b, stride=1, pad=0, dil=1):
    """Loop-per-output cross-correlation."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for bi in range(n):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = b[oc]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[oc, ci, u, v] * xp[bi, ci, i * stride + u * dil,
                                                             j * stride + v * dil]
                    out[bi, oc, i, j] = acc
    return out


def test_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    layer = ConvLayer(np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    np.testing.assert_array_equal(conv2d_forward(x, layer), x)
    gx, _, _ = conv2d_backward(x, layer, np.ones_like(x))
    np.testing.assert_array_equal(gx, np.ones_like(x))


def test_zero_kernel(rng):
    x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
    layer = ConvLayer(np.zeros((4, 3, 3, 3), np.float32), np.zeros(4, np.float32), padding=1)
    assert not conv2d_forward(x, layer).any()


def test_hand_cross_correlation():
    x = np.array([[1, 2], [3, 4]], dtype=np.float32).reshape(1, 1, 2, 2)
    w = np.array([[1, 0], [0, 1]], dtype=np.float32).reshape(1, 1, 2, 2)
    out = conv2d_forward(x, ConvLayer(w, np.zeros(1, np.float32)))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 5


@pytest.mark.parametrize("stride,pad,dil", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1)])
def test_forward_matches_loops(rng, stride, pad, dil):
    x = rng.normal(size=(2, 2, 6, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    got = conv2d_forward(x, ConvLayer(w, b, stride, pad, dil))
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, pad, dil), rtol=1e-12, atol=1e-12)


def test_output_size_formula():
    layer = ConvLayer(np.zeros((1, 1, 3, 3)), np.zeros(1), stride=2, padding=1, dilation=2)
    assert layer.output_hw(9, 8) == ((9 + 2 - 4 - 1) // 2 + 1, (8 + 2 - 4 - 1) // 2 + 1)


def test_channel_mismatch_rejected():
    layer = ConvLayer(np.zeros((1, 2, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError):
        conv2d_forward(np.zeros((1, 3, 4, 4)), layer)
    with pytest.raises(ValueError):
        conv2d_backward(np.zeros((1, 2, 4, 4)), layer, np.zeros((1, 1, 3, 3)))


def test_rank_checks():
    with pytest.raises(ValueError):
        check_tensor4(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        check_tensor4(np.zeros((1, 0, 2, 2)))


def test_backward_zero_upstream(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    layer = ConvLayer(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), padding=1)
    gx, gw, gb = conv2d_backward(x, layer, np.zeros((1, 3, 4, 4)))
    assert not gx.any() and not gw.any() and not gb.any()


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_backward_matches_finite_differences(rng, stride, pad):
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    layer = ConvLayer(w, b, stride=stride, padding=pad)
    up = rng.normal(size=conv2d_forward(x, layer).shape)
    gx, gw, gb = conv2d_backward(x, layer, up)
    f_x = lambda v: np.sum(up * conv2d_forward(v, layer))
    f_w = lambda v: np.sum(up * conv2d_forward(x, ConvLayer(v, b, stride, pad)))
    f_b = lambda v: np.sum(up * conv2d_forward(x, ConvLayer(w, v, stride, pad)))
    for analytic, f, at in ((gx, f_x, x), (gw, f_w, w), (gb, f_b, b)):
        num = finite_difference_gradient(f, at, 1e-3)
        np.testing.assert_allclose(analytic, num, rtol=1e-3, atol=1e-5)


@given(st.floats(-4, 4), st.integers(0, 2**31 - 1))
def test_forward_is_linear_in_input_and_weights(a, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(1, 2, 4, 4))
    w = r.normal(size=(2, 2, 3, 3))
    zero_b = np.zeros(2)
    base = conv2d_forward(x, ConvLayer(w, zero_b, padding=1))
    np.testing.assert_allclose(conv2d_forward(a * x, ConvLayer(w, zero_b, padding=1)), a * base,
                               rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(conv2d_forward(x, ConvLayer(a * w, zero_b, padding=1)), a * base,
                               rtol=1e-6, atol=1e-9)


def test_float32_stays_float32(rng):
    x = rng.normal(size=(1, 1, 3, 3)).astype(np.float32)
    layer = ConvLayer(np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    assert conv2d_forward(x, layer).dtype == np.float32


def test_relu_examples():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu(x), [0, 0, 2])
    np.testing.assert_array_equal(relu_backward(x, np.full(3, 5.0)), [0, 0, 5])


@given(hnp.arrays(np.float64, (2, 3), elements=st.floats(1e-3, 1e3)))
def test_relu_identity_on_positive(x):
    np.testing.assert_array_equal(relu(x), x)
    up = x * 2
    np.testing.assert_array_equal(relu_backward(x, up), up)


def test_sgd_examples():
    p, v = sgd_step(np.array([1.0]), np.array([2.0]), 0.1, np.zeros(1), 0.0)
    assert p[0] == pytest.approx(0.8)
    p, v = np.zeros(1), np.zeros(1)
    for _ in range(2):
        p, v = sgd_step(p, np.ones(1), 1.0, v, 0.9)
    assert p[0] == pytest.approx(-2.9)


def test_sgd_zero_lr_and_shapes():
    p = np.array([[1.5, -2.0]])
    p2, v = sgd_step(p, np.ones_like(p), 0.0, np.zeros_like(p), 0.9)
    np.testing.assert_array_equal(p2, p)
    np.testing.assert_array_equal(v, np.ones_like(p))
    with pytest.raises(ValueError):
        sgd_step(p, np.ones(3), 0.1, np.zeros_like(p))


def test_finite_difference_examples():
    g = finite_difference_gradient(lambda v: float(v[0] ** 2), np.array([3.0]), 1e-3)
    assert abs(g[0] - 6.0) < 1e-6
    assert not finite_difference_gradient(lambda v: 7.0, np.ones((2, 2))).any()
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda v: 0.0, np.ones(1), h=0)


@given(hnp.arrays(np.float64, 5, elements=st.floats(-3, 3)))
def test_finite_difference_of_sin(x):
    g = finite_difference_gradient(lambda v: float(np.sum(np.sin(v))), x, 1e-3)
    # central difference error is h^2/6 * |cos| <= 1.7e-7
    np.testing.assert_allclose(g, np.cos(x), atol=1e-6)
