"""Small neural-net primitives on numpy arrays with explicit backward passes.

All operators work on batched NCHW arrays, keep the input dtype, and return
plain arrays.  Backward functions take the same saved inputs plus the
upstream gradient and return gradients in input order.  Convolution uses an
im2col view (``sliding_window_view``) for the forward/weight-gradient
contractions and a kernel-position scatter loop for the input gradient.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, w, b=None, stride=1, pad=None):
    """Cross-correlation of x (N,Cin,H,W) with w (Cout,Cin,kh,kw).

    ``pad=None`` selects zero padding of (kh//2, kw//2), which preserves
    spatial dims for odd kernels at stride 1.
    """
    N, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = w.shape
    if Cin_w != Cin:
        raise ValueError(f"channel mismatch: input {Cin}, kernel {Cin_w}")
    if pad is None:
        pad = (kh // 2, kw // 2)
    ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    y = np.einsum("nchwij,ocij->nohw", win, w, optimize=True)
    if b is not None:
        y = y + b[None, :, None, None]
    return np.ascontiguousarray(y)


def conv2d_backward(x, w, dy, stride=1, pad=None, with_bias=True):
    """Returns (dx, dw, db) for conv2d_forward."""
    N, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    if pad is None:
        pad = (kh // 2, kw // 2)
    ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    dw = np.einsum("nchwij,nohw->ocij", win, dy, optimize=True)
    db = dy.sum(axis=(0, 2, 3)) if with_bias else None

    Ho, Wo = dy.shape[2], dy.shape[3]
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("nohw,oc->nchw", dy, w[:, :, i, j], optimize=True)
            dxp[:, :, i:i + (Ho - 1) * stride + 1:stride,
                j:j + (Wo - 1) * stride + 1:stride] += contrib
    dx = dxp[:, :, ph:ph + H, pw:pw + W]
    return dx, dw, db


def silu(x):
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))
    return x * s


def silu_backward(x, dy):
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))
    return dy * s * (1.0 + x * (1.0 - s))


def linear_forward(x, w, b=None):
    """x (..., Din) @ w (Dout, Din)^T + b."""
    y = x @ w.T
    if b is not None:
        y = y + b
    return y


def linear_backward(x, w, dy):
    dx = dy @ w
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = dy2.T @ x2
    db = dy2.sum(axis=0)
    return dx, dw, db


def _pool_edges(size, p):
    return [(size * i // p, size * (i + 1) // p) for i in range(p)]


def adaptive_avg_pool2d(x, p):
    """Average-pool x (N,C,H,W) into a (N,C,p,p) grid (adaptive windows)."""
    N, C, H, W = x.shape
    if H < p or W < p:
        raise ValueError(f"map {H}x{W} smaller than {p}x{p} grid")
    out = np.empty((N, C, p, p), dtype=x.dtype)
    for i, (r0, r1) in enumerate(_pool_edges(H, p)):
        for j, (c0, c1) in enumerate(_pool_edges(W, p)):
            out[:, :, i, j] = x[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    return out


def adaptive_avg_pool2d_backward(x, p, dy):
    N, C, H, W = x.shape
    dx = np.zeros_like(x)
    for i, (r0, r1) in enumerate(_pool_edges(H, p)):
        for j, (c0, c1) in enumerate(_pool_edges(W, p)):
            area = (r1 - r0) * (c1 - c0)
            dx[:, :, r0:r1, c0:c1] += dy[:, :, i, j, None, None] / area
    return dx


def nearest_upsample(x, factor):
    """Repeat each pixel of x (N,C,H,W) into a factor x factor block."""
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)


def nearest_upsample_backward(x_shape, factor, dy):
    N, C, H, W = x_shape
    return dy.reshape(N, C, H, factor, W, factor).sum(axis=(3, 5))


def l2_normalize(v, axis=-1, eps=1e-12):
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    return v / np.maximum(norm, eps)


def l2_normalize_backward(v, dy, axis=-1, eps=1e-12):
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    u = v / norm
    return (dy - u * (dy * u).sum(axis=axis, keepdims=True)) / norm
