import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from videodepth.tensor import (
    BadMagicError,
    DimensionOverflowError,
    Rng,
    ShapeError,
    TruncatedPayloadError,
    add,
    derive_seed,
    lerp,
    load_tensor,
    mul,
    randn,
    save_tensor,
    scale,
    tensor_new,
)


def test_tensor_new_fill():
    t = tensor_new([2, 3], 0)
    assert t.shape == (2, 3) and t.dtype == np.float32 and not t.any()
    assert tensor_new([1], 7.5).tolist() == [7.5]


@pytest.mark.parametrize("shape", [[2, 0], [0], [-1, 3], []])
def test_tensor_new_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        tensor_new(shape, 0)


def test_randn_determinism():
    a = randn(Rng(1), [4])
    b = randn(Rng(1), [4])
    assert np.array_equal(a, b)
    assert not np.array_equal(a, randn(Rng(2), [4]))


def test_randn_moments():
    x = randn(Rng(123), [100_000]).astype(np.float64)
    assert -0.02 <= x.mean() <= 0.02
    assert 0.98 <= x.var() <= 1.02


def test_seeded_streams_agree_for_1e4_samples():
    assert np.array_equal(Rng(99).normal([10_000]), Rng(99).normal([10_000]))


def test_child_streams_are_independent_and_stable():
    r = Rng(5)
    assert r.child(0).seed == derive_seed(5, 0)
    assert r.child(0).seed != r.child(1).seed
    assert np.array_equal(r.child(3).normal([8]), Rng(5).child(3).normal([8]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(0, 2**32 - 1))
def test_round_trip_bit_exact(tmp_path_factory, shape, seed):
    t = Rng(seed).normal(shape) * 1e3
    path = tmp_path_factory.mktemp("rt") / "t.dcrf"
    save_tensor(path, t)
    back = load_tensor(path)
    assert back.shape == t.shape
    assert back.tobytes() == t.tobytes()


def test_file_layout(tmp_path):
    p = tmp_path / "x.dcrf"
    save_tensor(p, np.arange(6, dtype=np.float32).reshape(2, 3))
    raw = p.read_bytes()
    assert raw[:4] == b"DCRF"
    assert struct.unpack_from("<III", raw, 4) == (1, 1, 2)
    assert struct.unpack_from("<QQ", raw, 16) == (2, 3)
    assert np.frombuffer(raw[32:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]
    assert len(raw) == 32 + 24


def test_bad_magic(tmp_path):
    p = tmp_path / "x.dcrf"
    save_tensor(p, np.ones(3, np.float32))
    raw = bytearray(p.read_bytes())
    raw[:4] = b"NOPE"
    p.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        load_tensor(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "x.dcrf"
    save_tensor(p, np.ones(10, np.float32))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(TruncatedPayloadError):
        load_tensor(p)


def test_dimension_overflow(tmp_path):
    p = tmp_path / "x.dcrf"
    p.write_bytes(b"DCRF" + struct.pack("<III", 1, 1, 2) + struct.pack("<QQ", 2**40, 2**40))
    with pytest.raises(DimensionOverflowError):
        load_tensor(p)


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(OSError):
        load_tensor(tmp_path / "absent.dcrf")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**31), st.floats(-3, 3, width=32))
def test_elementwise_ops_match_scalar_loop(n, seed, w):
    r = Rng(seed)
    a, b = r.normal([n]) * 10, r.normal([n]) * 10
    f32 = np.float32
    ref_add = [f32(x) + f32(y) for x, y in zip(a, b)]
    ref_mul = [f32(x) * f32(y) for x, y in zip(a, b)]
    ref_scale = [f32(x) * f32(w) for x in a]
    ref_lerp = [f32(x) + f32(w) * (f32(y) - f32(x)) for x, y in zip(a, b)]
    assert add(a, b).tobytes() == np.array(ref_add, f32).tobytes()
    assert mul(a, b).tobytes() == np.array(ref_mul, f32).tobytes()
    assert scale(a, w).tobytes() == np.array(ref_scale, f32).tobytes()
    assert lerp(a, b, w).tobytes() == np.array(ref_lerp, f32).tobytes()


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        add(np.ones(2, np.float32), np.ones(3, np.float32))
