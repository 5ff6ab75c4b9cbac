"""Reference quality metrics: PSNR and flow-based Warping Error.

Flow convention: a flow field has shape (H, W, 2) holding (dy, dx) per
pixel of the *successor* frame; content at pixel p of frame t+1 originated
at p - flow(p) in frame t.  Warping bilinearly samples the predecessor at
those source positions; samples falling outside the frame are excluded from
the error via a validity mask instead of being clamped.
"""

from __future__ import annotations

import numpy as np

PSNR_CAP_DB = 99.0
_CAP_RATIO = 10.0 ** (-PSNR_CAP_DB / 10.0)  # MSE/peak^2 below this hits the cap


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE), capped at 99.0 dB for (near-)identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse < peak * peak * _CAP_RATIO:
        return PSNR_CAP_DB
    return 10.0 * np.log10(peak * peak / mse)


def bilinear_warp(frame: np.ndarray, flow: np.ndarray):
    """Warp a frame forward along ``flow``; returns (warped, valid mask).

    warped[p] = bilinear_sample(frame, p - flow[p]); valid[p] is False when
    the sample position falls outside the frame rectangle.
    """
    frame = np.asarray(frame, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if frame.ndim != 2:
        raise ValueError("frame must be 2-D")
    H, W = frame.shape
    if flow.shape != (H, W, 2):
        raise ValueError(f"flow shape {flow.shape} does not match frame {frame.shape}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("non-finite flow")
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    sy = yy - flow[..., 0]
    sx = xx - flow[..., 1]
    valid = (sy >= 0) & (sy <= H - 1) & (sx >= 0) & (sx <= W - 1)
    sy_c = np.clip(sy, 0, H - 1)
    sx_c = np.clip(sx, 0, W - 1)
    y0 = np.floor(sy_c).astype(np.int64)
    x0 = np.floor(sx_c).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = sy_c - y0
    wx = sx_c - x0
    warped = (frame[y0, x0] * (1 - wy) * (1 - wx)
              + frame[y0, x1] * (1 - wy) * wx
              + frame[y1, x0] * wy * (1 - wx)
              + frame[y1, x1] * wy * wx)
    return warped, valid


def warping_error(video: np.ndarray, flows) -> dict:
    """Mean squared residual between each frame and its warped predecessor.

    ``video`` is (T, H, W); ``flows`` is a sequence of T-1 (H, W, 2) fields.
    Returns {"value": masked mean squared residual, "n_valid": pixels used}.
    """
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 3:
        raise ValueError("video must be T x H x W")
    T = video.shape[0]
    flows = list(flows)
    if len(flows) != T - 1:
        raise ValueError(f"need {T - 1} flows for {T} frames, got {len(flows)}")
    total = 0.0
    n_valid = 0
    for t in range(T - 1):
        warped, valid = bilinear_warp(video[t], flows[t])
        resid = (video[t + 1] - warped)[valid]
        total += float((resid ** 2).sum())
        n_valid += int(valid.sum())
    value = total / n_valid if n_valid else 0.0
    return {"value": value, "n_valid": n_valid}
