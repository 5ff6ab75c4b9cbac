"""Patch-level momentum-contrast machinery.

Two identically-shaped convolutional encoders process paired frames: the
query encoder (trained by gradient descent) sees the degraded frame, the key
encoder (updated only as an exponential moving average of the query weights)
sees both frames and fills a FIFO memory queue with patch features.  Each
frame is encoded into a P x P grid of L2-normalized feature vectors; the
contrastive loss per patch is the softmax cross-entropy that picks the
matching key patch against every queued negative at temperature tau:

    L = (1/P^2) sum_p -log[ exp(q_p.k_p/tau)
                            / (exp(q_p.k_p/tau) + sum_Q exp(q_p.Q/tau)) ]

Gradients flow into the query encoder only; the key encoder and the queue
are never written by a backward pass.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import Rng
from . import nn

TAU_DEFAULT = 0.07
MOMENTUM_DEFAULT = 0.999
PATCH_GRID_DEFAULT = 4
FEATURE_DIM_DEFAULT = 64
QUEUE_CAPACITY_DEFAULT = 1024
NORM_TOLERANCE = 1e-4


class EmptyQueueError(ValueError):
    """The loss needs at least one queued negative."""


# ---------------------------------------------------------------------------
# Encoder weights (plain dict of arrays) and the EMA-coupled pair
# ---------------------------------------------------------------------------


def init_encoder(rng: Rng, in_channels=1, widths=(8, 16, 32),
                 dim=FEATURE_DIM_DEFAULT) -> dict:
    """Three strided conv layers plus a linear projection head."""
    w0, w1, w2 = widths
    def conv(co, ci):
        return (rng.normal((co, ci, 3, 3)) * np.sqrt(2.0 / (ci * 9))).astype(np.float64)
    return {
        "conv1.w": conv(w0, in_channels), "conv1.b": np.zeros(w0),
        "conv2.w": conv(w1, w0), "conv2.b": np.zeros(w1),
        "conv3.w": conv(w2, w1), "conv3.b": np.zeros(w2),
        "proj.w": (rng.normal((dim, w2)) * np.sqrt(1.0 / w2)).astype(np.float64),
        "proj.b": np.zeros(dim),
    }


def clone_weights(theta: dict) -> dict:
    return {k: v.copy() for k, v in theta.items()}


@dataclass
class EncoderPair:
    """theta_q trains; theta_k only ever receives EMA copies of theta_q."""

    theta_q: dict
    theta_k: dict
    m: float = MOMENTUM_DEFAULT

    def __post_init__(self):
        if not 0.0 <= self.m <= 1.0:
            raise ValueError("momentum must be in [0, 1]")
        self.check_shapes()

    def check_shapes(self):
        if set(self.theta_q) != set(self.theta_k):
            raise ValueError("encoder weight sets differ in keys")
        for k in self.theta_q:
            if self.theta_q[k].shape != self.theta_k[k].shape:
                raise ValueError(f"shape mismatch for {k}")


def init_pair(rng: Rng, in_channels=1, widths=(8, 16, 32), dim=FEATURE_DIM_DEFAULT,
              m=MOMENTUM_DEFAULT) -> EncoderPair:
    theta_q = init_encoder(rng, in_channels, widths, dim)
    return EncoderPair(theta_q, clone_weights(theta_q), m)


def momentum_update(pair: EncoderPair) -> EncoderPair:
    """theta_k <- m*theta_k + (1-m)*theta_q, element-wise, in place."""
    pair.check_shapes()
    for k in pair.theta_k:
        pair.theta_k[k] = pair.m * pair.theta_k[k] + (1.0 - pair.m) * pair.theta_q[k]
    return pair


# ---------------------------------------------------------------------------
# Encoding: conv stack -> P x P pooled grid -> projection -> L2 normalize
# ---------------------------------------------------------------------------


def _encode_fwd(theta: dict, frame: np.ndarray):
    if frame.ndim != 3:
        raise ValueError("frame must be C x H x W")
    x0 = frame[None]
    z1 = nn.conv2d_forward(x0, theta["conv1.w"], theta["conv1.b"], stride=1)
    a1 = nn.silu(z1)
    z2 = nn.conv2d_forward(a1, theta["conv2.w"], theta["conv2.b"], stride=2)
    a2 = nn.silu(z2)
    z3 = nn.conv2d_forward(a2, theta["conv3.w"], theta["conv3.b"], stride=2)
    a3 = nn.silu(z3)
    return a3[0], {"theta": theta, "x0": x0, "z1": z1, "a1": a1, "z2": z2,
                   "a2": a2, "z3": z3}


def encode(theta: dict, frame: np.ndarray) -> np.ndarray:
    """Feature map of one frame; spatial dims shrink by 4 (two stride-2 convs)."""
    fmap, _ = _encode_fwd(theta, frame)
    return fmap


def patch_features(fmap: np.ndarray, P: int, proj_w: np.ndarray,
                   proj_b: np.ndarray | None = None) -> np.ndarray:
    """Pool a C x H x W map into P x P patches, project, L2-normalize.

    Returns a (P, P, D) grid; every vector has unit norm.
    """
    pooled = nn.adaptive_avg_pool2d(fmap[None], P)[0]       # (C, P, P)
    vecs = nn.linear_forward(pooled.transpose(1, 2, 0), proj_w, proj_b)
    return nn.l2_normalize(vecs)


def encode_patches(theta: dict, frame: np.ndarray, P: int = PATCH_GRID_DEFAULT) -> np.ndarray:
    return patch_features(encode(theta, frame), P, theta["proj.w"], theta["proj.b"])


def _encode_patches_fwd(theta: dict, frame: np.ndarray, P: int):
    fmap, cache = _encode_fwd(theta, frame)
    pooled = nn.adaptive_avg_pool2d(fmap[None], P)[0]
    pre = nn.linear_forward(pooled.transpose(1, 2, 0), theta["proj.w"], theta["proj.b"])
    grid = nn.l2_normalize(pre)
    cache.update({"fmap": fmap, "pooled": pooled, "pre": pre, "P": P})
    return grid, cache


def _encode_patches_bwd(cache: dict, dgrid: np.ndarray) -> dict:
    """Weight gradients for the query path; the input frame gradient is dropped."""
    theta = cache["theta"]
    dpre = nn.l2_normalize_backward(cache["pre"], dgrid)
    dpooled_t, dproj_w, dproj_b = nn.linear_backward(
        cache["pooled"].transpose(1, 2, 0), theta["proj.w"], dpre)
    dfmap = nn.adaptive_avg_pool2d_backward(
        cache["fmap"][None], cache["P"], dpooled_t.transpose(2, 0, 1)[None])[0]
    da3 = dfmap[None]
    dz3 = nn.silu_backward(cache["z3"], da3)
    da2, dw3, db3 = nn.conv2d_backward(cache["a2"], theta["conv3.w"], dz3, stride=2)
    dz2 = nn.silu_backward(cache["z2"], da2)
    da1, dw2, db2 = nn.conv2d_backward(cache["a1"], theta["conv2.w"], dz2, stride=2)
    dz1 = nn.silu_backward(cache["z1"], da1)
    _, dw1, db1 = nn.conv2d_backward(cache["x0"], theta["conv1.w"], dz1, stride=1)
    return {"conv1.w": dw1, "conv1.b": db1, "conv2.w": dw2, "conv2.b": db2,
            "conv3.w": dw3, "conv3.b": db3, "proj.w": dproj_w, "proj.b": dproj_b}


# ---------------------------------------------------------------------------
# Memory queue
# ---------------------------------------------------------------------------


class MemoryQueue:
    """Fixed-capacity FIFO of unit-norm feature vectors."""

    def __init__(self, capacity: int = QUEUE_CAPACITY_DEFAULT):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque = deque(maxlen=capacity)

    @property
    def size(self) -> int:
        return len(self._entries)

    def snapshot(self) -> np.ndarray:
        """Entries as an (N, D) array, oldest first."""
        if not self._entries:
            raise EmptyQueueError("memory queue is empty")
        return np.stack(tuple(self._entries))


def enqueue(queue: MemoryQueue, keys: np.ndarray) -> MemoryQueue:
    """FIFO-append key vectors ((..., D), flattened); oldest evicted first."""
    keys = np.asarray(keys)
    if keys.size == 0:
        return queue
    flat = keys.reshape(-1, keys.shape[-1])
    norms = np.sqrt((flat * flat).sum(-1))
    if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
        worst = float(np.abs(norms - 1.0).max())
        raise ValueError(f"keys must be unit-norm within {NORM_TOLERANCE}, off by {worst:.2e}")
    for row in flat:
        queue._entries.append(row.copy())
    return queue


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _logits(q_grid, k_grid, queue, tau):
    if tau <= 0:
        raise ValueError("tau must be positive")
    q = np.asarray(q_grid, dtype=np.float64)
    k = np.asarray(k_grid, dtype=np.float64)
    if q.shape != k.shape:
        raise ValueError(f"grid shapes differ: {q.shape} vs {k.shape}")
    qf = q.reshape(-1, q.shape[-1])
    kf = k.reshape(-1, k.shape[-1])
    negs = queue.snapshot().astype(np.float64)
    if negs.shape[1] != qf.shape[1]:
        raise ValueError("queue feature dim mismatch")
    pos = (qf * kf).sum(-1) / tau
    neg = qf @ negs.T / tau
    return qf, kf, negs, pos, neg


def infonce_patch_loss(q_grid, k_grid, queue: MemoryQueue, tau: float = TAU_DEFAULT) -> float:
    """Mean per-patch softmax cross-entropy of positives against the queue."""
    _, _, _, pos, neg = _logits(q_grid, k_grid, queue, tau)
    allv = np.concatenate([pos[:, None], neg], axis=1)
    mx = allv.max(axis=1)
    lse = mx + np.log(np.exp(allv - mx[:, None]).sum(axis=1))
    loss = float(np.mean(lse - pos))
    if not np.isfinite(loss):
        raise ValueError("non-finite contrastive loss")
    return loss


def infonce_backward(q_grid, k_grid, queue: MemoryQueue, tau: float = TAU_DEFAULT,
                     upstream: float = 1.0) -> np.ndarray:
    """d(loss)/d(q_grid); the key grid and queue receive no gradient."""
    qf, kf, negs, pos, neg = _logits(q_grid, k_grid, queue, tau)
    allv = np.concatenate([pos[:, None], neg], axis=1)
    allv -= allv.max(axis=1, keepdims=True)
    p = np.exp(allv)
    p /= p.sum(axis=1, keepdims=True)
    M = qf.shape[0]
    dq = (upstream / (M * tau)) * ((p[:, :1] - 1.0) * kf + p[:, 1:] @ negs)
    return dq.reshape(np.shape(q_grid))


# ---------------------------------------------------------------------------
# One optimization step and the demo loop
# ---------------------------------------------------------------------------


def contrastive_step(pair: EncoderPair, lr_frame, hr_frame, queue: MemoryQueue,
                     tau: float = TAU_DEFAULT, lr: float = 0.5,
                     P: int = PATCH_GRID_DEFAULT):
    """One contrastive update.

    Order: loss(theta_q on LR vs theta_k on HR, current queue) -> SGD step on
    theta_q -> EMA update of theta_k -> enqueue this step's HR then LR keys.
    Returns (loss, pair, queue); pair and queue are mutated in place.
    """
    q_grid, cache = _encode_patches_fwd(pair.theta_q, np.asarray(lr_frame), P)
    k_hr = encode_patches(pair.theta_k, np.asarray(hr_frame), P)
    k_lr = encode_patches(pair.theta_k, np.asarray(lr_frame), P)
    loss = infonce_patch_loss(q_grid, k_hr, queue, tau)
    dq = infonce_backward(q_grid, k_hr, queue, tau)
    grads = _encode_patches_bwd(cache, dq)
    for key in pair.theta_q:
        pair.theta_q[key] -= lr * grads[key]
    momentum_update(pair)
    enqueue(queue, k_hr)
    enqueue(queue, k_lr)
    return loss, pair, queue


def _smooth_image(rng: Rng, size: int) -> np.ndarray:
    img = rng.normal((1, 1, size, size))
    box = np.full((1, 1, 5, 5), 1.0 / 25.0)
    for _ in range(2):
        img = nn.conv2d_forward(img, box)
    img = img[0, 0]
    lo, hi = img.min(), img.max()
    return (img - lo) / max(hi - lo, 1e-9)


def synth_contrastive_pair(rng: Rng, size: int = 32, noise: float = 0.05):
    """A smooth random texture and its degraded view (2x box-down/up + noise)."""
    hr = _smooth_image(rng, size)
    small = hr.reshape(size // 2, 2, size // 2, 2).mean(axis=(1, 3))
    lr = nn.nearest_upsample(small[None, None], 2)[0, 0]
    lr = np.clip(lr + noise * rng.normal((size, size)), 0.0, 1.0)
    return hr[None], lr[None]


def moco_demo(steps: int = 200, seed: int = 0, size: int = 32,
              dim: int = FEATURE_DIM_DEFAULT, P: int = PATCH_GRID_DEFAULT,
              capacity: int = QUEUE_CAPACITY_DEFAULT, tau: float = TAU_DEFAULT,
              m: float = MOMENTUM_DEFAULT, lr: float = 0.5):
    """Toy contrastive loop on synthetic pairs.

    The queue is filled to capacity with key-encoder features before the
    measured steps so the loss curve is not confounded by queue growth.
    Returns a list of {"step", "loss"} rows.
    """
    rng = Rng(seed)
    pair = init_pair(rng.spawn(1), in_channels=1, dim=dim, m=m)
    queue = MemoryQueue(capacity)
    while queue.size < capacity:
        hr, lr_frame = synth_contrastive_pair(rng)
        enqueue(queue, encode_patches(pair.theta_k, hr, P))
        enqueue(queue, encode_patches(pair.theta_k, lr_frame, P))
    rows = []
    for step in range(steps):
        hr, lr_frame = synth_contrastive_pair(rng, size)
        loss, pair, queue = contrastive_step(pair, lr_frame, hr, queue, tau, lr, P)
        rows.append({"step": step, "loss": loss})
    return rows
