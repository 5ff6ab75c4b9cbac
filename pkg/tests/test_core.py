import hashlib

import numpy as np
import pytest

from scst.core import (
    DimOverflowError,
    MalformedHeaderError,
    NonFiniteValueError,
    Rng,
    TensorFormatError,
    TruncatedPayloadError,
    finite_diff_grad,
    gradient_rel_error,
    tensor_read,
    tensor_write,
)

# xoshiro256** stream for seed 7, computed once by this implementation and
# pinned; splitmix64/xoshiro cores are separately checked against the
# published reference vectors below.
GOLDEN_U64_SEED7 = [
    12923355070828475994, 5142052590334782674, 15488392906492639638,
    18098058644649177664, 18278145976438096664, 16099837482234907721,
    1120678062349637716, 1926500276298015196, 7447070967899653408,
    2800512878259339619, 9986469540036305303, 13500401043614375896,
    17320858093524191697, 16248828569861257751, 8327222803780191930,
    10346393495295799883,
]

# sha256 of the file written for the 1000-element seed-42 normal tensor,
# computed once and pinned.
GOLDEN_FILE_SHA256 = "0c7f5d9d1159d6168f102c2099119bdbfb480550454316e8a720e4230c78c976"


def test_roundtrip_scalar(tmp_path):
    t = np.array([0.0], dtype=np.float32)
    tensor_write(t, tmp_path / "a.scst")
    assert np.array_equal(tensor_read(tmp_path / "a.scst"), t)


def test_roundtrip_2x3(tmp_path):
    t = np.arange(1, 7, dtype=np.float32).reshape(2, 3)
    tensor_write(t, tmp_path / "a.scst")
    back = tensor_read(tmp_path / "a.scst")
    assert back.shape == (2, 3)
    assert np.array_equal(back, t)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_roundtrip_bit_exact_random(tmp_path, dtype):
    rng = Rng(123)
    t = rng.normal((4, 5, 6)).astype(dtype)
    tensor_write(t, tmp_path / "a.scst")
    back = tensor_read(tmp_path / "a.scst")
    assert back.dtype == dtype
    assert back.tobytes() == t.tobytes()


def test_golden_file_hash(tmp_path):
    t = Rng(42).normal((1000,)).astype(np.float32)
    path = tmp_path / "g.scst"
    tensor_write(t, path)
    h1 = hashlib.sha256(path.read_bytes()).hexdigest()
    tensor_write(t, path)  # second run, same bytes
    h2 = hashlib.sha256(path.read_bytes()).hexdigest()
    assert h1 == h2 == GOLDEN_FILE_SHA256


def test_malformed_magic(tmp_path):
    p = tmp_path / "bad.scst"
    p.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(MalformedHeaderError):
        tensor_read(p)


def test_dim_overflow(tmp_path):
    import struct

    p = tmp_path / "bad.scst"
    header = b"SCST" + struct.pack("<HBB", 1, 0, 2) + struct.pack("<2Q", 2**62, 4)
    p.write_bytes(header)
    with pytest.raises(DimOverflowError):
        tensor_read(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.scst"
    tensor_write(np.ones(10, dtype=np.float32), p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(TruncatedPayloadError):
        tensor_read(p)


def test_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "t.scst"
    tensor_write(np.ones(3, dtype=np.float32), p)
    p.write_bytes(p.read_bytes() + b"xx")
    with pytest.raises(TensorFormatError):
        tensor_read(p)


# --- PRNG ------------------------------------------------------------------


def test_xoshiro_reference_vector():
    # reference sequence from state {1,2,3,4}
    r = Rng(0)
    r._s = [1, 2, 3, 4]
    assert [r.next_u64() for _ in range(4)] == [
        11520, 0, 1509978240, 1215971899390074240,
    ]


def test_splitmix64_reference_vector():
    from scst.core import _splitmix64

    v1, z = _splitmix64(1234567)
    v2, _ = _splitmix64(z)
    assert (v1, v2) == (6457827717110365317, 3203168211198807973)


def test_golden_stream_seed7():
    r = Rng(7)
    assert [r.next_u64() for _ in range(16)] == GOLDEN_U64_SEED7


def test_same_seed_same_stream():
    a, b = Rng(99), Rng(99)
    assert [a.next_u64() for _ in range(100)] == [b.next_u64() for _ in range(100)]
    assert np.array_equal(a.normal((50,)), b.normal((50,)))


def test_uniform_range_and_moments():
    u = Rng(5).uniform((4000,))
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.02


def test_normal_moments():
    z = Rng(5).normal((4000,))
    assert abs(z.mean()) < 0.06
    assert abs(z.std() - 1.0) < 0.05


def test_permutation_is_permutation():
    p = Rng(11).permutation(257)
    assert sorted(p.tolist()) == list(range(257))


# --- finite differences ----------------------------------------------------


def test_fd_square():
    g = finite_diff_grad(lambda v: float(v[0] ** 2), np.array([3.0]), eps=1e-4)
    assert abs(g[0] - 6.0) < 1e-6


def test_fd_sum():
    x = Rng(3).normal((7,))
    g = finite_diff_grad(lambda v: float(v.sum()), x)
    assert np.allclose(g, 1.0, atol=1e-9)


def test_fd_cubic_polynomial():
    # degree-3 polynomial: grad of sum(x^3 - 2x) is 3x^2 - 2
    x = Rng(4).normal((9,))
    g = finite_diff_grad(lambda v: float((v**3 - 2 * v).sum()), x, eps=1e-4)
    assert gradient_rel_error(3 * x**2 - 2, g) < 1e-6


def test_fd_nonfinite_raises():
    import math

    def f(v):
        return math.inf

    with pytest.raises(NonFiniteValueError):
        finite_diff_grad(f, np.array([1.0]))
