"""Traversal orders over T x H x W volumes.

Two families of paths are generated:

* continuous (serpentine) paths: every consecutive pair of visited voxels
  is adjacent (Manhattan distance 1 in (t, h, w)), both inside a frame and
  across the frame boundary.  Three base patterns, one per innermost axis,
  each with a reversed twin -- six paths total.
* sweep paths: plain row-major flattening, which resets at row and frame
  boundaries and therefore violates adjacency wherever a reset jumps.

Geometry of the continuous patterns (the canonical serpentine completion):
the innermost axis snakes back and forth, flipping direction after every
row so the cursor never jumps; the middle axis snakes per outer step the
same way; the outer axis always advances by one.  Entering the next outer
slice keeps the (middle, inner) position and traverses the slice mirrored.
Axis roles per pattern: innermost ``w`` -> (t, h, w), innermost ``h`` ->
(t, w, h), innermost ``t`` -> (h, w, t); with ``t`` innermost the scan runs
through time at a fixed pixel before moving to a neighbouring pixel.

Linearization is row-major over (t, h, w): ``index = t*H*W + h*W + w``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_MAX_INDEX = 2**63 - 1


class ShapeOverflowError(ValueError):
    """t*h*w does not fit 64-bit index arithmetic."""


class NotAPermutationError(ValueError):
    """An index array expected to be a permutation is not one."""


@dataclass(frozen=True)
class VolumeShape:
    t: int
    h: int
    w: int

    def __post_init__(self):
        if min(self.t, self.h, self.w) < 1:
            raise ValueError(f"non-positive dim in {self}")
        if self.t * self.h * self.w > _MAX_INDEX:
            raise ShapeOverflowError(f"{self} overflows 64-bit indexing")

    @property
    def size(self) -> int:
        return self.t * self.h * self.w


@dataclass(frozen=True)
class ScanPattern:
    """One of the six continuous traversals: innermost axis + direction."""

    innermost: str  # "w", "h" or "t"
    reverse: bool = False

    def __post_init__(self):
        if self.innermost not in ("w", "h", "t"):
            raise ValueError(f"innermost must be w/h/t, got {self.innermost!r}")

    @property
    def name(self) -> str:
        return f"{self.innermost}-{'reverse' if self.reverse else 'forward'}"


ALL_PATTERNS = tuple(
    ScanPattern(axis, rev) for axis in ("w", "h", "t") for rev in (False, True)
)

PATTERN_BY_NAME = {p.name: p for p in ALL_PATTERNS}

# axis roles per innermost choice: (outer, middle, inner) as positions into (t, h, w)
_AXIS_ROLES = {"w": (0, 1, 2), "h": (0, 2, 1), "t": (1, 2, 0)}


@lru_cache(maxsize=256)
def _serpentine_forward(t: int, h: int, w: int, innermost: str) -> np.ndarray:
    dims = (t, h, w)
    outer_ax, mid_ax, inner_ax = _AXIS_ROLES[innermost]
    n_outer, n_mid, n_inner = dims[outer_ax], dims[mid_ax], dims[inner_ax]

    order = np.empty(t * h * w, dtype=np.int64)
    coord = [0, 0, 0]
    pos = 0
    row = 0  # global row counter; inner direction flips every row
    for k0 in range(n_outer):
        mids = range(n_mid) if k0 % 2 == 0 else range(n_mid - 1, -1, -1)
        for k1 in mids:
            inns = range(n_inner) if row % 2 == 0 else range(n_inner - 1, -1, -1)
            for k2 in inns:
                coord[outer_ax] = k0
                coord[mid_ax] = k1
                coord[inner_ax] = k2
                order[pos] = (coord[0] * h + coord[1]) * w + coord[2]
                pos += 1
            row += 1
    return order


def generate_path(shape: VolumeShape, pattern: ScanPattern) -> np.ndarray:
    """Continuous scan path for ``pattern``: a permutation of voxel indices
    with Manhattan distance exactly 1 between consecutive entries.

    The reversed pattern is the element-wise reversal of the forward one.
    """
    fwd = _serpentine_forward(shape.t, shape.h, shape.w, pattern.innermost)
    return fwd[::-1].copy() if pattern.reverse else fwd.copy()


def sweep_path(shape: VolumeShape, reverse: bool = False) -> np.ndarray:
    """Row-major flattening (the reset-at-boundary baseline).

    Continuity is NOT guaranteed: the cursor jumps at every row and frame
    boundary, giving t*(h-1) + (t-1) violations whenever w > 1.
    """
    order = np.arange(shape.size, dtype=np.int64)
    return order[::-1].copy() if reverse else order


def invert_path(p: np.ndarray) -> np.ndarray:
    """Inverse permutation: ``invert_path(p)[p[i]] == i``."""
    p = np.asarray(p, dtype=np.int64)
    _check_permutation(p)
    inv = np.empty_like(p)
    inv[p] = np.arange(p.size, dtype=np.int64)
    return inv


def _check_permutation(p: np.ndarray) -> None:
    if p.ndim != 1:
        raise NotAPermutationError(f"path must be 1-D, got ndim={p.ndim}")
    seen = np.zeros(p.size, dtype=bool)
    if p.size and (p.min() < 0 or p.max() >= p.size):
        raise NotAPermutationError("index out of range")
    seen[p] = True
    if not seen.all():
        raise NotAPermutationError("duplicate/missing indices")


def gather_sequence(v: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Reorder a C x T x H x W volume into a C x L sequence along path ``p``."""
    c = v.shape[0]
    flat = v.reshape(c, -1)
    if flat.shape[1] != p.size:
        raise ValueError(f"path length {p.size} != voxels {flat.shape[1]}")
    return flat[:, p]


def scatter_sequence(s: np.ndarray, p: np.ndarray, shape: VolumeShape) -> np.ndarray:
    """Inverse of :func:`gather_sequence`; exact (pure data movement)."""
    c, length = s.shape
    if length != shape.size:
        raise ValueError(f"sequence length {length} != voxels {shape.size}")
    out = np.empty((c, shape.size), dtype=s.dtype)
    out[:, p] = s
    return out.reshape(c, shape.t, shape.h, shape.w)


def continuity_report(p: np.ndarray, shape: VolumeShape) -> dict:
    """Count adjacency violations along ``p``.

    A violation is a consecutive pair at Manhattan distance != 1 in
    (t, h, w) coordinates.  ``max_jump`` is the largest distance seen
    (0 for paths of length 1).
    """
    p = np.asarray(p, dtype=np.int64)
    if p.size != shape.size:
        raise ValueError(f"path length {p.size} != voxels {shape.size}")
    _check_permutation(p)
    if p.size < 2:
        return {"violations": 0, "max_jump": 0}
    tt = p // (shape.h * shape.w)
    rem = p % (shape.h * shape.w)
    hh = rem // shape.w
    ww = rem % shape.w
    dist = (np.abs(np.diff(tt)) + np.abs(np.diff(hh)) + np.abs(np.diff(ww)))
    return {
        "violations": int(np.count_nonzero(dist != 1)),
        "max_jump": int(dist.max()),
    }
