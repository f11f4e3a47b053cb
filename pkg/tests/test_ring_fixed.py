import sys
import os

# Add the project root to sys.path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from logic.errors import FixedPointOverflowError, LengthMismatchError
from logic.ring_fixed import (
    FixedScalar,
    add_wrap,
    add_wrap_vec,
    decode,
    decode_vec,
    encode,
    encode_vec,
    matmul_truncate,
    mul_truncate,
    mul_truncate_vec,
    overflow_checks,
    sub_wrap_vec,
)

F = 22
MASK = (1 << 64) - 1


def test_encode_decode_scalars():
    """1.5 is 1.5 * 2^22 on the ring; negatives wrap to the top half."""
    assert encode(1.5).raw == 6291456
    assert decode(encode(1.5)) == 1.5
    minus_one = encode(-1.0)
    assert minus_one.raw == (1 << 64) - (1 << 22)
    assert minus_one.signed == -(1 << 22)
    assert decode(minus_one) == -1.0


def test_mul_truncate_and_add_wrap():
    assert decode(mul_truncate(encode(1.5), encode(-2.0))) == -3.0
    assert decode(mul_truncate(encode(0.5), encode(0.25))) == 0.125
    top = FixedScalar(MASK, F)
    assert add_wrap(top, FixedScalar(1, F)).raw == 0


def test_frac_bits_must_match():
    with pytest.raises(ValueError):
        mul_truncate(encode(1.0, 22), encode(1.0, 16))
    with pytest.raises(ValueError):
        add_wrap_vec(encode_vec([1.0], 22), encode_vec([1.0], 16))


def test_vector_roundtrip_is_exact_on_the_grid():
    rng = np.random.default_rng(0)
    values = rng.integers(-(1 << 30), 1 << 30, size=1000) / float(1 << F)
    assert np.array_equal(decode_vec(encode_vec(values)), values)


def test_vector_add_sub_wrap():
    a, b = encode_vec([1.0, -2.5, 3.25]), encode_vec([0.5, 0.5, -3.25])
    assert np.array_equal(decode_vec(add_wrap_vec(a, b)), [1.5, -2.0, 0.0])
    assert np.array_equal(decode_vec(sub_wrap_vec(a, b)), [0.5, -3.0, 6.5])
    with pytest.raises(LengthMismatchError):
        add_wrap_vec(a, encode_vec([1.0]))


def test_mul_truncate_vec_matches_big_int_floor():
    """Elementwise products equal floor(a*b / 2^f) computed with Python ints."""
    rng = np.random.default_rng(1)
    a = rng.integers(-(1 << 40), 1 << 40, size=500)
    b = rng.integers(-(1 << 40), 1 << 40, size=500)
    got = mul_truncate_vec(encode_vec(a / float(1 << F)), encode_vec(b / float(1 << F))).raw
    expected = [((int(x) * int(y)) >> F) & MASK for x, y in zip(a, b)]
    assert [int(v) for v in got] == expected


def test_matmul_truncates_once_per_output():
    rng = np.random.default_rng(2)
    a = rng.integers(-(1 << 30), 1 << 30, size=(4, 7))
    b = rng.integers(-(1 << 30), 1 << 30, size=(7, 3))
    got = matmul_truncate(a, b, F)
    for i in range(4):
        for j in range(3):
            exact = sum(int(a[i, k]) * int(b[k, j]) for k in range(7))
            assert int(got[i, j]) & MASK == (exact >> F) & MASK
    with pytest.raises(LengthMismatchError):
        matmul_truncate(a, a, F)


def test_overflow_checks_are_opt_in():
    with overflow_checks(True):
        with pytest.raises(FixedPointOverflowError):
            encode(2.0 ** 41)
        with pytest.raises(FixedPointOverflowError):
            mul_truncate(encode(2.0 ** 20), encode(2.0 ** 22))
        with pytest.raises(FixedPointOverflowError):
            encode_vec([1.0, -(2.0 ** 42)])
    with overflow_checks(False):
        # without checks the value wraps silently
        assert encode_vec([2.0 ** 42]).raw.dtype == np.uint64
