"""Figure rendering for CLI reports.

Every function takes already-computed rows, writes one PNG next to the
delimited output, and returns the path.  Matplotlib runs on the Agg
backend so the CLI never needs a display.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

__all__ = ["save_scan_path_figure", "save_bench_figure",
           "save_block_bench_figure", "save_loss_figure"]


def _finish(fig, out_path) -> str:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return str(out_path)


def save_scan_path_figure(path_indices, shape, out_path, title="") -> str:
    """3-D polyline through the voxel centres in visit order."""
    t, h, w = shape
    idx = np.asarray(path_indices, dtype=np.int64)
    tt, rem = np.divmod(idx, h * w)
    yy, xx = np.divmod(rem, w)
    fig = plt.figure(figsize=(6, 5))
    ax = fig.add_subplot(projection="3d")
    ax.plot(xx, yy, tt, lw=1.0, color="tab:blue")
    ax.scatter(xx[:1], yy[:1], tt[:1], color="tab:green", label="start")
    ax.scatter(xx[-1:], yy[-1:], tt[-1:], color="tab:red", label="end")
    ax.set_xlabel("w")
    ax.set_ylabel("h")
    ax.set_zlabel("t")
    ax.set_title(title or f"scan path over {t}x{h}x{w}")
    ax.legend(loc="upper left")
    return _finish(fig, out_path)


def save_bench_figure(rows, out_path, title="runtime scaling") -> str:
    """Log-log mean runtime vs sequence length, one line per variant."""
    fig, ax = plt.subplots(figsize=(6, 4))
    variants = sorted({r["variant"] for r in rows})
    for variant in variants:
        pts = sorted((r["length"], r["mean_ns"]) for r in rows
                     if r["variant"] == variant)
        ax.plot([p[0] for p in pts], [p[1] / 1e6 for p in pts],
                marker="o", label=variant)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sequence length")
    ax.set_ylabel("mean time (ms)")
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    return _finish(fig, out_path)


def save_block_bench_figure(rows, out_path, title="block variants") -> str:
    """Bar chart of mean runtime per block variant."""
    fig, ax = plt.subplots(figsize=(5, 4))
    names = [r["variant"] for r in rows]
    means = [r["mean_ns"] / 1e6 for r in rows]
    ax.bar(names, means, color="tab:blue")
    ax.set_ylabel("mean time (ms)")
    voxels = rows[0]["voxels"] if rows else 0
    ax.set_title(f"{title} ({voxels} voxels)")
    return _finish(fig, out_path)


def save_loss_figure(rows, out_path, title="training loss") -> str:
    """Loss vs step; rows may carry a 'kind' column to split series."""
    fig, ax = plt.subplots(figsize=(6, 4))
    kinds = sorted({r.get("kind", "loss") for r in rows})
    for kind in kinds:
        pts = [(r["step"], r["loss"]) for r in rows
               if r.get("kind", "loss") == kind]
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                lw=1.0, label=kind)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if len(kinds) > 1 or kinds != ["loss"]:
        ax.legend()
    return _finish(fig, out_path)
