"""Residual volume block: depthwise 3D conv, K scan branches, merge.

Forward contract for a C x T x H x W feature volume v:

    u      = depthwise_conv3d(v) + bias          (zero padding, odd kernels)
    act    = nonlinearity(u)                     (silu by default)
    x_e    = W_in act                            (optional expansion, C -> E)
    y_k    = selective_scan(gather(x_e, path_k)) per branch, channels batched
    merged = mean_k(scatter(y_k, path_k))        (or sum)
    gated  = merged * silu(W_gate v)             (optional gate)
    out    = v + W_out gated                     (optional projection, E -> C)

With the optional weights absent (the default) the middle collapses to
``out = v + merge_k(scatter(scan(gather(act))))``: depthwise conv and
per-channel scans alone never mix channels.  The expansion/gate/projection
matrices supply that cross-channel path when a caller needs one.

Every branch owns one set of scan parameters shared across channels.  A
naive quadratic attention operator over the same flattened token sequence
serves as the complexity comparator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import NonFiniteValueError
from .nn import silu, silu_backward
from .scan import (
    ALL_PATTERNS,
    ScanPattern,
    VolumeShape,
    gather_sequence,
    generate_path,
    scatter_sequence,
    sweep_path,
)
from .ssm import SelectiveProj, SsmParams, init_ssm_params, _backward_batched, _forward_batched

MERGE_RULES = ("mean", "sum")
ACTIVATIONS = ("silu", "identity")
PATH_KINDS = ("serpentine", "sweep")


@dataclass
class BranchWeights:
    params: SsmParams
    proj: SelectiveProj


@dataclass
class Mamba3dConfig:
    channels: int
    state: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    patterns: tuple[ScanPattern, ...] = tuple(ALL_PATTERNS)
    merge: str = "mean"
    activation: str = "silu"
    engine: str = "parallel"
    conv_kernel: np.ndarray = None
    conv_bias: np.ndarray = None
    branches: list[BranchWeights] = field(default_factory=list)
    # "sweep" replaces the serpentine branch paths with plain row-major
    # traversals (the discontinuous baseline); innermost is then ignored.
    path_kind: str = "serpentine"
    # optional cross-channel weights: w_in (E, C) expands before the scans,
    # w_out (C, E) projects back after the merge, w_gate (E, C) multiplies
    # the merged scans by silu(w_gate v).  All default to absent (identity).
    w_in: np.ndarray | None = None
    w_out: np.ndarray | None = None
    w_gate: np.ndarray | None = None

    @property
    def expanded(self) -> int:
        return self.w_in.shape[0] if self.w_in is not None else self.channels

    def validate(self) -> None:
        if not self.patterns:
            raise ValueError("pattern list must be non-empty")
        if self.path_kind not in PATH_KINDS:
            raise ValueError(f"path_kind must be one of {PATH_KINDS}")
        e = self.expanded
        if self.w_in is not None and self.w_in.shape != (e, self.channels):
            raise ValueError("w_in must be (E, C)")
        if (self.w_in is None) != (self.w_out is None) and e != self.channels:
            raise ValueError("w_in and w_out must be given together when E != C")
        if self.w_out is not None and self.w_out.shape != (self.channels, e):
            raise ValueError("w_out must be (C, E)")
        if self.w_gate is not None and self.w_gate.shape != (e, self.channels):
            raise ValueError("w_gate must be (E, C)")
        if any(k % 2 == 0 or k < 1 for k in self.kernel):
            raise ValueError(f"kernel sizes must be odd, got {self.kernel}")
        if self.merge not in MERGE_RULES:
            raise ValueError(f"merge must be one of {MERGE_RULES}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.conv_kernel.shape != (self.channels, *self.kernel):
            raise ValueError("conv kernel shape mismatch")
        if self.conv_bias.shape != (self.channels,):
            raise ValueError("conv bias shape mismatch")
        if len(self.branches) != len(self.patterns):
            raise ValueError("one weight set per pattern required")


def init_mamba3d(rng, channels: int, state: int, kernel=(3, 3, 3),
                 patterns=tuple(ALL_PATTERNS), merge="mean", activation="silu",
                 engine="parallel", weight_tied=False, dtype=np.float64,
                 path_kind="serpentine", expand: int | None = None,
                 gated: bool = False) -> Mamba3dConfig:
    """Random block weights; ``weight_tied`` gives a pattern and its flip
    identical branch weights (used by the reversal-equivariance property).
    ``expand``/``gated`` switch on the cross-channel projection and gate."""
    conv_kernel = (rng.normal((channels, *kernel)) * 0.1).astype(dtype)
    conv_bias = (rng.normal((channels,)) * 0.01).astype(dtype)
    branches: list[BranchWeights] = []
    by_key = {}
    for pat in patterns:
        key = pat.innermost if weight_tied else pat
        if key not in by_key:
            p, pr = init_ssm_params(rng, state, dtype=dtype)
            by_key[key] = BranchWeights(p, pr)
        src = by_key[key]
        branches.append(BranchWeights(
            SsmParams(src.params.a.copy(), src.params.b_static.copy(),
                      src.params.c_static.copy(), src.params.d, src.params.delta_bias),
            SelectiveProj(src.proj.wb.copy(), src.proj.wc.copy(), src.proj.wd),
        ))
    w_in = w_out = w_gate = None
    if expand is not None or gated:
        e = expand if expand is not None else channels
        s = 1.0 / np.sqrt(channels)
        w_in = (rng.normal((e, channels)) * s).astype(dtype)
        w_out = (rng.normal((channels, e)) * s).astype(dtype)
        if gated:
            w_gate = (rng.normal((e, channels)) * s).astype(dtype)
    cfg = Mamba3dConfig(channels, state, tuple(kernel), tuple(patterns), merge,
                        activation, engine, conv_kernel, conv_bias, branches,
                        path_kind, w_in, w_out, w_gate)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Depthwise 3D convolution
# ---------------------------------------------------------------------------


def _check_dwconv_args(v, kernels, bias):
    if v.ndim != 4:
        raise ValueError("volume must be C x T x H x W")
    C = v.shape[0]
    if kernels.ndim != 4 or kernels.shape[0] != C:
        raise ValueError(f"need one kernel per channel, got {kernels.shape} for C={C}")
    if any(k % 2 == 0 for k in kernels.shape[1:]):
        raise ValueError(f"kernel dims must be odd, got {kernels.shape[1:]}")
    if bias.shape != (C,):
        raise ValueError("bias shape mismatch")


def dwconv3d_forward(v, kernels, bias):
    """Per-channel 3D cross-correlation with zero padding, shape preserved."""
    _check_dwconv_args(v, kernels, bias)
    C, T, H, W = v.shape
    kt, kh, kw = kernels.shape[1:]
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    vp = np.pad(v, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    out = np.zeros_like(v)
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                out += kernels[:, dt, dh, dw, None, None, None] * \
                    vp[:, dt:dt + T, dh:dh + H, dw:dw + W]
    return out + bias[:, None, None, None]


def dwconv3d_backward(v, kernels, dy):
    """Returns (dv, dkernels, dbias) for dwconv3d_forward."""
    C, T, H, W = v.shape
    kt, kh, kw = kernels.shape[1:]
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    vp = np.pad(v, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    dvp = np.zeros_like(vp)
    dk = np.zeros_like(kernels)
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                sl = vp[:, dt:dt + T, dh:dh + H, dw:dw + W]
                dk[:, dt, dh, dw] = (dy * sl).sum(axis=(1, 2, 3))
                dvp[:, dt:dt + T, dh:dh + H, dw:dw + W] += \
                    kernels[:, dt, dh, dw, None, None, None] * dy
    dv = dvp[:, pt:pt + T, ph:ph + H, pw:pw + W]
    db = dy.sum(axis=(1, 2, 3))
    return dv, dk, db


# ---------------------------------------------------------------------------
# Block forward / backward
# ---------------------------------------------------------------------------


def _block_ctx(v, cfg: Mamba3dConfig):
    v = np.asarray(v)
    cfg.validate()
    if v.ndim != 4 or v.shape[0] != cfg.channels:
        raise ValueError(f"volume shape {v.shape} does not match config")
    if not np.all(np.isfinite(v)):
        raise NonFiniteValueError("non-finite feature volume")
    shape = VolumeShape(*v.shape[1:])
    u = dwconv3d_forward(v, cfg.conv_kernel, cfg.conv_bias)
    act = silu(u) if cfg.activation == "silu" else u
    x_e = np.einsum("ec,cthw->ethw", cfg.w_in, act) if cfg.w_in is not None else act
    branch = []
    merged = np.zeros_like(x_e)
    for pat, bw in zip(cfg.patterns, cfg.branches):
        path = (generate_path(shape, pat) if cfg.path_kind == "serpentine"
                else sweep_path(shape, pat.reverse))
        seq = gather_sequence(x_e, path)
        y, ctx = _forward_batched(bw.params, bw.proj, seq, engine=cfg.engine)
        merged += scatter_sequence(y, path, shape)
        branch.append((path, ctx))
    if cfg.merge == "mean":
        merged /= len(cfg.patterns)
    gate_pre = gate = None
    gated = merged
    if cfg.w_gate is not None:
        gate_pre = np.einsum("ec,cthw->ethw", cfg.w_gate, v)
        gate = silu(gate_pre)
        gated = merged * gate
    proj = np.einsum("ce,ethw->cthw", cfg.w_out, gated) if cfg.w_out is not None else gated
    out = v + proj
    if not np.all(np.isfinite(out)):
        raise NonFiniteValueError("block produced non-finite output")
    return out, {"v": v, "u": u, "act": act, "branch": branch, "shape": shape,
                 "merged": merged, "gate_pre": gate_pre, "gate": gate,
                 "gated": gated}


def mamba3d_forward(v, cfg: Mamba3dConfig):
    """Apply the block; output shape equals input shape."""
    out, _ = _block_ctx(v, cfg)
    return out


def mamba3d_backward(v, cfg: Mamba3dConfig, dout):
    """Gradients of sum(dout * block(v)) w.r.t. v and every weight.

    Returns {"v", "conv_kernel", "conv_bias", "branches": [per-branch dict
    with keys a, b_static, c_static, d, wb, wc, wd, delta_bias]} plus
    "w_in"/"w_out"/"w_gate" when those weights are present.
    """
    out, ctx = _block_ctx(v, cfg)
    dout = np.asarray(dout)
    if dout.shape != out.shape:
        raise ValueError("dout shape mismatch")
    return _backward_from_ctx(ctx, cfg, dout)


def _backward_from_ctx(ctx, cfg: Mamba3dConfig, dout):
    grads = {}
    dv_extra = np.zeros_like(ctx["v"])

    if cfg.w_out is not None:
        dgated = np.einsum("ce,cthw->ethw", cfg.w_out, dout)
        grads["w_out"] = np.einsum("cthw,ethw->ce", dout, ctx["gated"])
    else:
        dgated = dout
    if cfg.w_gate is not None:
        dmerged_all = dgated * ctx["gate"]
        dgate = silu_backward(ctx["gate_pre"], dgated * ctx["merged"])
        grads["w_gate"] = np.einsum("ethw,cthw->ec", dgate, ctx["v"])
        dv_extra += np.einsum("ec,ethw->cthw", cfg.w_gate, dgate)
    else:
        dmerged_all = dgated

    K = len(cfg.patterns)
    dmerged = dmerged_all / K if cfg.merge == "mean" else dmerged_all
    dx_e = np.zeros_like(ctx["act"] if cfg.w_in is None else dmerged)
    branch_grads = []
    for path, bctx in ctx["branch"]:
        dy_seq = gather_sequence(dmerged, path)
        g = _backward_batched(bctx, dy_seq)
        dx_e += scatter_sequence(g.pop("x"), path, ctx["shape"])
        g.pop("h0")
        branch_grads.append(g)
    if cfg.w_in is not None:
        dact = np.einsum("ec,ethw->cthw", cfg.w_in, dx_e)
        grads["w_in"] = np.einsum("ethw,cthw->ec", dx_e, ctx["act"])
    else:
        dact = dx_e
    du = silu_backward(ctx["u"], dact) if cfg.activation == "silu" else dact
    dv, dk, db = dwconv3d_backward(ctx["v"], cfg.conv_kernel, du)
    dv += dout + dv_extra
    grads.update({"v": dv, "conv_kernel": dk, "conv_bias": db, "branches": branch_grads})
    return grads


# ---------------------------------------------------------------------------
# Quadratic attention comparator
# ---------------------------------------------------------------------------


@dataclass
class AttentionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    cap: int = 65536


def init_attention(rng, channels: int, cap: int = 65536) -> AttentionWeights:
    s = 1.0 / np.sqrt(channels)
    return AttentionWeights(
        rng.normal((channels, channels)) * s,
        rng.normal((channels, channels)) * s,
        rng.normal((channels, channels)) * s,
        cap,
    )


def attention_baseline(v, weights: AttentionWeights):
    """Scaled dot-product attention over all L = T*H*W tokens (O(L^2))."""
    v = np.asarray(v)
    C = v.shape[0]
    L = int(np.prod(v.shape[1:]))
    if L > weights.cap:
        raise ValueError(f"sequence length {L} exceeds attention cap {weights.cap}")
    X = v.reshape(C, L).T
    q = X @ weights.wq.T
    k = X @ weights.wk.T
    val = X @ weights.wv.T
    s = (q @ k.T) / np.sqrt(C)
    s -= s.max(axis=1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=1, keepdims=True)
    return (a @ val).T.reshape(v.shape)
