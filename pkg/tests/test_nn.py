"""Finite-difference and closed-form checks for the nn primitives."""

import numpy as np
import pytest

from scst.core import Rng, finite_diff_grad, gradient_rel_error
from scst import nn


def rand(rng, shape, scale=1.0):
    return rng.normal(shape) * scale


def test_conv2d_identity_delta_kernel():
    rng = Rng(1)
    x = rand(rng, (2, 3, 5, 6))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    y = nn.conv2d_forward(x, w)
    assert np.array_equal(y, x)


def test_conv2d_matches_direct_loops():
    rng = Rng(2)
    x = rand(rng, (2, 3, 6, 5))
    w = rand(rng, (4, 3, 3, 3))
    b = rand(rng, (4,))
    y = nn.conv2d_forward(x, w, b)
    # direct 6-loop reference with zero padding
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(y)
    for n in range(2):
        for o in range(4):
            for i in range(6):
                for j in range(5):
                    acc = b[o]
                    for c in range(3):
                        for di in range(3):
                            for dj in range(3):
                                acc += xp[n, c, i + di, j + dj] * w[o, c, di, dj]
                    ref[n, o, i, j] = acc
    assert np.max(np.abs(y - ref)) < 1e-12


def test_conv2d_stride2_shape():
    x = np.zeros((1, 2, 9, 8))
    w = np.zeros((5, 2, 3, 3))
    y = nn.conv2d_forward(x, w, stride=2)
    assert y.shape == (1, 5, 5, 4)


def test_conv2d_channel_mismatch():
    with pytest.raises(ValueError):
        nn.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_backward_fd(stride):
    rng = Rng(3 + stride)
    x = rand(rng, (2, 2, 5, 4))
    w = rand(rng, (3, 2, 3, 3))
    b = rand(rng, (3,))
    g = rand(rng, nn.conv2d_forward(x, w, b, stride=stride).shape)

    dx, dw, db = nn.conv2d_backward(x, w, g, stride=stride)
    loss_x = lambda v: float((nn.conv2d_forward(v.reshape(x.shape), w, b, stride=stride) * g).sum())
    loss_w = lambda v: float((nn.conv2d_forward(x, v.reshape(w.shape), b, stride=stride) * g).sum())
    loss_b = lambda v: float((nn.conv2d_forward(x, w, v, stride=stride) * g).sum())
    assert gradient_rel_error(dx.ravel(), finite_diff_grad(loss_x, x.ravel())) < 1e-6
    assert gradient_rel_error(dw.ravel(), finite_diff_grad(loss_w, w.ravel())) < 1e-6
    assert gradient_rel_error(db, finite_diff_grad(loss_b, b)) < 1e-6


def test_silu_values_and_fd():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    y = nn.silu(x)
    assert abs(y[2]) < 1e-15
    assert abs(y[4] - 2.0 / (1.0 + np.exp(-2.0))) < 1e-12
    g = np.array([1.0, -2.0, 0.5, 3.0, 1.0])
    got = nn.silu_backward(x, g)
    fd = finite_diff_grad(lambda v: float((nn.silu(v) * g).sum()), x)
    assert gradient_rel_error(got, fd) < 1e-8


def test_linear_fd():
    rng = Rng(5)
    x = rand(rng, (4, 7, 6))
    w = rand(rng, (3, 6))
    b = rand(rng, (3,))
    g = rand(rng, (4, 7, 3))
    dx, dw, db = nn.linear_backward(x, w, g)
    fd_x = finite_diff_grad(lambda v: float((nn.linear_forward(v.reshape(x.shape), w, b) * g).sum()), x.ravel())
    fd_w = finite_diff_grad(lambda v: float((nn.linear_forward(x, v.reshape(w.shape), b) * g).sum()), w.ravel())
    fd_b = finite_diff_grad(lambda v: float((nn.linear_forward(x, w, v) * g).sum()), b)
    assert gradient_rel_error(dx.ravel(), fd_x) < 1e-6
    assert gradient_rel_error(dw.ravel(), fd_w) < 1e-6
    assert gradient_rel_error(db, fd_b) < 1e-6


def test_adaptive_pool_quadrants():
    # 4x4 single-channel map pooled to 2x2 = quadrant means
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out = nn.adaptive_avg_pool2d(x, 2)
    expect = np.array([[2.5, 4.5], [10.5, 12.5]])
    assert np.array_equal(out[0, 0], expect)


def test_adaptive_pool_nondivisible_and_fd():
    rng = Rng(6)
    x = rand(rng, (2, 3, 5, 7))
    out = nn.adaptive_avg_pool2d(x, 2)
    assert out.shape == (2, 3, 2, 2)
    # windows tile the input: constant map pools to the constant
    c = np.full((1, 1, 5, 7), 3.25)
    assert np.allclose(nn.adaptive_avg_pool2d(c, 3), 3.25)
    g = rand(rng, (2, 3, 2, 2))
    dx = nn.adaptive_avg_pool2d_backward(x, 2, g)
    fd = finite_diff_grad(lambda v: float((nn.adaptive_avg_pool2d(v.reshape(x.shape), 2) * g).sum()), x.ravel())
    assert gradient_rel_error(dx.ravel(), fd) < 1e-6


def test_adaptive_pool_too_small():
    with pytest.raises(ValueError):
        nn.adaptive_avg_pool2d(np.zeros((1, 1, 3, 8)), 4)


def test_nearest_upsample_and_backward():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    up = nn.nearest_upsample(x, 2)
    assert up.shape == (1, 1, 4, 4)
    assert np.array_equal(up[0, 0, :2, :2], np.full((2, 2), 1.0))
    assert np.array_equal(up[0, 0, 2:, 2:], np.full((2, 2), 4.0))
    rng = Rng(7)
    g = rand(rng, (1, 1, 4, 4))
    dx = nn.nearest_upsample_backward(x.shape, 2, g)
    fd = finite_diff_grad(lambda v: float((nn.nearest_upsample(v.reshape(x.shape), 2) * g).sum()), x.ravel())
    assert gradient_rel_error(dx.ravel(), fd) < 1e-6


def test_l2_normalize_unit_and_fd():
    rng = Rng(8)
    v = rand(rng, (5, 6))
    u = nn.l2_normalize(v)
    assert np.allclose((u * u).sum(-1), 1.0, atol=1e-12)
    g = rand(rng, (5, 6))
    dv = nn.l2_normalize_backward(v, g)
    fd = finite_diff_grad(lambda w: float((nn.l2_normalize(w.reshape(v.shape)) * g).sum()), v.ravel())
    assert gradient_rel_error(dv.ravel(), fd) < 1e-6
