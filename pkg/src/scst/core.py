"""Shared numerical substrate: tensor file I/O, deterministic PRNG, gradient oracle.

Conventions used throughout the package:

* production arrays are C-contiguous float32, oracle computations run in
  float64; every operation follows the dtype of its inputs,
* the on-disk tensor format ("SCST files") is: magic ``b"SCST"``, u16
  version (=1), u8 dtype code (0=f32, 1=f64), u8 ndim, ``ndim`` u64 dims,
  then the row-major payload.  All multi-byte fields little-endian.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SCST"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_MAX_INDEX = 2**63 - 1


class TensorFormatError(Exception):
    """Base class for tensor file format violations."""


class MalformedHeaderError(TensorFormatError):
    """Magic, version, dtype code, ndim, or a dim field is invalid."""


class DimOverflowError(TensorFormatError):
    """Declared dims do not fit 64-bit index arithmetic."""


class TruncatedPayloadError(TensorFormatError):
    """File ends before the declared payload."""


class NonFiniteValueError(ValueError):
    """An operation that requires finite values saw NaN or infinity."""


def tensor_write(t: np.ndarray, path) -> None:
    """Write ``t`` (float32 or float64) to ``path`` in the SCST format."""
    t = np.ascontiguousarray(t)
    if t.dtype not in _DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {t.dtype}, want float32/float64")
    if t.ndim < 1 or t.ndim > 255:
        raise MalformedHeaderError(f"ndim {t.ndim} outside 1..255")
    if any(d < 1 for d in t.shape):
        raise MalformedHeaderError(f"non-positive dim in shape {t.shape}")
    header = MAGIC + struct.pack("<HBB", FORMAT_VERSION, _DTYPE_CODES[t.dtype], t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = t.astype(t.dtype.newbyteorder("<"), copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def tensor_read(path) -> np.ndarray:
    """Read an SCST tensor file; inverse of :func:`tensor_write` bit-exactly."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise MalformedHeaderError("file shorter than fixed header")
    if raw[:4] != MAGIC:
        raise MalformedHeaderError(f"bad magic {raw[:4]!r}")
    version, code, ndim = struct.unpack("<HBB", raw[4:8])
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise MalformedHeaderError(f"unknown dtype code {code}")
    if ndim < 1:
        raise MalformedHeaderError("ndim must be >= 1")
    dims_end = 8 + 8 * ndim
    if len(raw) < dims_end:
        raise MalformedHeaderError("file ends inside the dims block")
    dims = struct.unpack(f"<{ndim}Q", raw[8:dims_end])
    if any(d < 1 for d in dims):
        raise MalformedHeaderError(f"non-positive dim in {dims}")
    count = math.prod(dims)  # Python ints, no silent wraparound
    if count > _MAX_INDEX:
        raise DimOverflowError(f"{dims} exceeds 64-bit index arithmetic")
    dtype = _CODE_DTYPES[code]
    need = count * dtype.itemsize
    got = len(raw) - dims_end
    if got < need:
        raise TruncatedPayloadError(f"payload has {got} bytes, header declares {need}")
    if got > need:
        raise TensorFormatError(f"{got - need} trailing bytes after payload")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=dims_end)
    return data.reshape(dims).astype(dtype.newbyteorder("="), copy=True)


# ---------------------------------------------------------------------------
# Deterministic PRNG
# ---------------------------------------------------------------------------

_MASK = 2**64 - 1


def _splitmix64(z: int):
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    out = z
    out = ((out ^ (out >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    out = ((out ^ (out >> 27)) * 0x94D049BB133111EB) & _MASK
    return out ^ (out >> 31), z


class Rng:
    """xoshiro256** generator, state seeded with splitmix64.

    Pure-integer implementation so the u64 stream is identical on every
    platform for a given seed (see the golden-vector test).  Floating-point
    helpers derive from that stream: ``uniform`` takes the top 53 bits,
    ``normal`` is Box-Muller over uniforms.  ``integers`` uses the modulo
    method; the bias is negligible for bounds far below 2**64.
    """

    __slots__ = ("seed", "_s", "_spare_normal")

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        s = []
        z = self.seed
        for _ in range(4):
            v, z = _splitmix64(z)
            s.append(v)
        self._s = s
        self._spare_normal = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = s1 * 5 & _MASK
        result = ((result << 7 | result >> 57) & _MASK) * 9 & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << 45 | s3 >> 19) & _MASK
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self, size=None):
        """Uniform float64 in [0, 1), scalar or array of ``size``."""
        if size is None:
            return (self.next_u64() >> 11) * 2.0**-53
        n = int(np.prod(size))
        vals = [(self.next_u64() >> 11) * 2.0**-53 for _ in range(n)]
        return np.array(vals, dtype=np.float64).reshape(size)

    def normal(self, size=None):
        """Standard normal float64 via Box-Muller, scalar or array."""
        if size is None:
            return self._next_normal()
        n = int(np.prod(size))
        vals = [self._next_normal() for _ in range(n)]
        return np.array(vals, dtype=np.float64).reshape(size)

    def _next_normal(self) -> float:
        if self._spare_normal is not None:
            v, self._spare_normal = self._spare_normal, None
            return v
        u1 = 1.0 - self.uniform()  # (0, 1], keeps log finite
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi)."""
        if hi <= lo:
            raise ValueError(f"empty range [{lo}, {hi})")
        return lo + self.next_u64() % (hi - lo)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n) as int64."""
        p = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            p[i], p[j] = p[j], p[i]
        return p

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream keyed by ``tag``."""
        return Rng(self.next_u64() ^ (tag * 0x9E3779B97F4A7C15 & _MASK))


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, in float64.

    This is the reference oracle every hand-written backward pass in the
    package is checked against; it must stay independent of those passes.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteValueError(f"f non-finite near element {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def gradient_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Inf-norm relative disagreement, robust near zero gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    num = float(np.max(np.abs(a - b))) if a.size else 0.0
    den = max(float(np.max(np.abs(a))) if a.size else 0.0,
              float(np.max(np.abs(b))) if b.size else 0.0, 1e-8)
    return num / den


def state_hash(weights: dict) -> str:
    """SHA-256 over a weight dict (sorted keys, shapes, raw bytes).

    Bitwise-sensitive: used to prove that frozen weight sets were not
    touched by a training or backward pass.
    """
    import hashlib

    h = hashlib.sha256()
    for key in sorted(weights):
        arr = np.ascontiguousarray(weights[key])
        h.update(key.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
