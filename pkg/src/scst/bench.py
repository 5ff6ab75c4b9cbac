"""Timing harness for the scan kernels, the block and the attention
comparator.

Rows use a fixed schema — ``length`` (or ``voxels``), ``variant``,
``mean_ns``, ``p50``, ``p95`` (plus ``min_ns``, kept out of the CSV) —
so they serialize directly to the columns the CLI emits.
``scaling_ratio`` condenses a row set into the time(2L)/time(L) figure
the linear-complexity check is stated in.
"""

from __future__ import annotations

import gc
import time

import numpy as np

from .block import (attention_baseline, init_attention, init_mamba3d,
                    mamba3d_forward)
from .core import Rng
from .ssm import init_ssm_params, selective_scan

__all__ = ["time_callable", "bench_selective_scan", "bench_attention",
           "bench_block", "scaling_ratio", "BLOCK_VARIANTS"]


def time_callable(fn, reps: int = 5, warmup: int = 1) -> dict:
    """Wall-clock stats (ns) for ``fn()`` over ``reps`` timed calls.

    The collector is paused around the timed reps (as ``timeit`` does)
    so a GC pause in one rep cannot masquerade as workload time.
    ``min_ns`` is the robust statistic for scaling checks: the minimum
    is a lower bound on the true cost, and anything above it is
    interference from the rest of the process.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    for _ in range(warmup):
        fn()
    samples = []
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            fn()
            samples.append(time.perf_counter_ns() - t0)
    finally:
        if gc_was_enabled:
            gc.enable()
    arr = np.array(samples, dtype=np.float64)
    return {"mean_ns": float(arr.mean()),
            "p50": float(np.percentile(arr, 50)),
            "p95": float(np.percentile(arr, 95)),
            "min_ns": float(arr.min())}


def bench_selective_scan(lengths, state: int = 8, reps: int = 5, seed: int = 0,
                         engines=("sequential", "parallel")) -> list[dict]:
    """Time the selective scan per length and engine on one random input."""
    rows = []
    for length in lengths:
        if length < 1:
            raise ValueError("lengths must be positive")
        rng = Rng(seed).spawn(length)
        params, proj = init_ssm_params(rng, state, dtype=np.float64)
        x = rng.normal((int(length),))
        for engine in engines:
            def run(e=engine):
                selective_scan(params, proj, x, engine=e)
            stats = time_callable(run, reps)
            rows.append({"length": int(length), "variant": engine, **stats})
    return rows


def bench_attention(lengths, channels: int = 16, reps: int = 5,
                    seed: int = 0) -> list[dict]:
    """Time the quadratic attention comparator per sequence length."""
    rows = []
    for length in lengths:
        rng = Rng(seed).spawn(length)
        weights = init_attention(rng, channels, cap=max(lengths) * 2)
        v = rng.normal((channels, int(length), 1, 1))
        stats = time_callable(lambda: attention_baseline(v, weights), reps)
        rows.append({"length": int(length), "variant": "attention", **stats})
    return rows


BLOCK_VARIANTS = ("stcm", "sweep", "attn")


def bench_block(shape, variants=BLOCK_VARIANTS, reps: int = 3,
                seed: int = 0) -> list[dict]:
    """Time block variants on a (C, T, H, W) volume.

    ``stcm`` is the continuous-scan block, ``sweep`` the same block on
    row-major paths, ``attn`` the quadratic attention comparator.
    """
    c, t, h, w = (int(x) for x in shape)
    rng = Rng(seed)
    v = rng.normal((c, t, h, w))
    voxels = t * h * w
    rows = []
    for variant in variants:
        if variant not in BLOCK_VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; "
                             f"choose from {BLOCK_VARIANTS}")
        if variant == "attn":
            weights = init_attention(rng.spawn(1), c, cap=max(voxels, 65536))
            fn = lambda: attention_baseline(v, weights)
        else:
            kind = "serpentine" if variant == "stcm" else "sweep"
            cfg = init_mamba3d(rng.spawn(2), channels=c, state=4,
                               path_kind=kind)
            fn = lambda cfg=cfg: mamba3d_forward(v, cfg)
        stats = time_callable(fn, reps)
        rows.append({"voxels": voxels, "variant": variant, **stats})
    return rows


def scaling_ratio(rows: list[dict], variant: str, l1: int, l2: int,
                  stat: str = "mean_ns") -> float:
    """time(l2)/time(l1) for one variant from a bench row set.

    ``stat`` selects the timing statistic; ``p50`` is the robust choice
    when the ratio feeds a pass/fail scaling check.
    """
    by_len = {r["length"]: r[stat] for r in rows if r["variant"] == variant}
    if l1 not in by_len or l2 not in by_len:
        raise ValueError(f"missing lengths for {variant}: have {sorted(by_len)}")
    return by_len[l2] / by_len[l1]
