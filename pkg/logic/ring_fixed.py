"""
Fixed-point arithmetic over the 64-bit integer ring.

A real x is stored as round(x * 2^f) mod 2^64 (two's complement for negative
values). Products carry 2f fractional bits and are truncated back to f by an
arithmetic shift, which is the deterministic truncation of simulation mode.

Scalar ops work on Python ints. Vector ops work on numpy uint64 arrays; the
int64 helpers ``mul_shift`` and ``matmul_shift`` are shared with the fixed
nn backend.
"""
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from logic.errors import FixedPointOverflowError, LengthMismatchError

logger = logging.getLogger(__name__)

RING_BITS = 64
DEFAULT_FRAC_BITS = 22

_RING = 1 << RING_BITS
_MASK = _RING - 1
_HALF = 1 << (RING_BITS - 1)

_overflow_checks = os.environ.get("HYFL_CHECK_OVERFLOW", "0").strip().lower() in ("1", "true", "yes")


def set_overflow_checks(enabled: bool) -> None:
    global _overflow_checks
    _overflow_checks = bool(enabled)


def overflow_checks_enabled() -> bool:
    return _overflow_checks


@contextmanager
def overflow_checks(enabled: bool = True):
    """Temporarily switch overflow detection (used by tests)."""
    previous = _overflow_checks
    set_overflow_checks(enabled)
    try:
        yield
    finally:
        set_overflow_checks(previous)


# ============================================================================
# TIPOS
# ============================================================================

@dataclass(frozen=True)
class FixedScalar:
    raw: int
    frac_bits: int = DEFAULT_FRAC_BITS

    def __post_init__(self):
        if not 0 <= self.raw < _RING:
            raise ValueError(f"raw value {self.raw} outside the 64-bit ring")

    @property
    def signed(self) -> int:
        return self.raw - _RING if self.raw >= _HALF else self.raw


@dataclass(frozen=True, eq=False)
class FixedVec:
    raw: np.ndarray
    frac_bits: int = DEFAULT_FRAC_BITS

    def __post_init__(self):
        if self.raw.dtype != np.uint64:
            object.__setattr__(self, "raw", np.asarray(self.raw).astype(np.uint64))

    def __len__(self) -> int:
        return int(self.raw.size)

    @property
    def signed(self) -> np.ndarray:
        return self.raw.view(np.int64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FixedVec):
            return NotImplemented
        return (self.frac_bits == other.frac_bits
                and self.raw.shape == other.raw.shape
                and bool(np.array_equal(self.raw, other.raw)))

    __hash__ = None


def _bound(frac_bits: int) -> float:
    return float(2 ** (RING_BITS - 1 - frac_bits))


def _same_frac(a, b) -> int:
    if a.frac_bits != b.frac_bits:
        raise ValueError(f"fracBits differ: {a.frac_bits} vs {b.frac_bits}")
    return a.frac_bits


def _same_length(a: FixedVec, b: FixedVec) -> None:
    if a.raw.shape != b.raw.shape:
        raise LengthMismatchError(f"length mismatch: {a.raw.shape} vs {b.raw.shape}")


# ============================================================================
# ESCALARES
# ============================================================================

def encode(x: float, frac_bits: int = DEFAULT_FRAC_BITS) -> FixedScalar:
    """raw = round(x * 2^f) mod 2^64."""
    if _overflow_checks and not abs(x) < _bound(frac_bits):
        raise FixedPointOverflowError(f"|{x}| >= 2^{RING_BITS - 1 - frac_bits}")
    return FixedScalar(int(round(x * (1 << frac_bits))) & _MASK, frac_bits)


def decode(s: FixedScalar) -> float:
    return s.signed / (1 << s.frac_bits)


def mul_truncate(a: FixedScalar, b: FixedScalar) -> FixedScalar:
    f = _same_frac(a, b)
    product = a.signed * b.signed
    if _overflow_checks and abs(product) >= 1 << (RING_BITS - 1 + f):
        raise FixedPointOverflowError(f"product {decode(a)} * {decode(b)} leaves the ring range")
    return FixedScalar((product >> f) & _MASK, f)


def add_wrap(a: FixedScalar, b: FixedScalar) -> FixedScalar:
    f = _same_frac(a, b)
    return FixedScalar((a.raw + b.raw) & _MASK, f)


# ============================================================================
# VECTORES
# ============================================================================

def encode_vec(x, frac_bits: int = DEFAULT_FRAC_BITS) -> FixedVec:
    values = np.asarray(x, dtype=np.float64)
    bound = _bound(frac_bits)
    if _overflow_checks and values.size and not np.all(np.abs(values) < bound):
        raise FixedPointOverflowError(f"values outside +-2^{RING_BITS - 1 - frac_bits}")
    scaled = np.rint(values * float(1 << frac_bits))
    if values.size and not np.all(np.abs(scaled) < 2.0 ** 63):
        # Out-of-range floats are integral at this magnitude, so fmod wraps them exactly.
        scaled = np.fmod(scaled, 2.0 ** 64)
        scaled = np.where(scaled >= 2.0 ** 63, scaled - 2.0 ** 64, scaled)
        scaled = np.where(scaled < -(2.0 ** 63), scaled + 2.0 ** 64, scaled)
    return FixedVec(scaled.astype(np.int64).view(np.uint64), frac_bits)


def decode_vec(v: FixedVec) -> np.ndarray:
    return v.raw.view(np.int64).astype(np.float64) / float(1 << v.frac_bits)


def add_wrap_vec(a: FixedVec, b: FixedVec) -> FixedVec:
    f = _same_frac(a, b)
    _same_length(a, b)
    return FixedVec(a.raw + b.raw, f)


def sub_wrap_vec(a: FixedVec, b: FixedVec) -> FixedVec:
    f = _same_frac(a, b)
    _same_length(a, b)
    return FixedVec(a.raw - b.raw, f)


def mul_shift(a: np.ndarray, b: np.ndarray, frac_bits: int) -> np.ndarray:
    """Exact floor(a * b / 2^f) mod 2^64 for int64 arrays (broadcasting).

    Splitting each operand as hi * 2^f + lo keeps every partial product in
    64 bits, so the result equals the shift of the 128-bit product.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    mask = np.int64((1 << frac_bits) - 1)
    shift = np.int64(frac_bits)
    ah, al = a >> shift, a & mask
    bh, bl = b >> shift, b & mask
    with np.errstate(over="ignore"):
        return ((ah * bh) << shift) + ah * bl + al * bh + ((al * bl) >> shift)


def matmul_shift(a: np.ndarray, b: np.ndarray, frac_bits: int) -> np.ndarray:
    """Matrix product of int64 fixed-point arrays, truncated once per output."""
    mask = np.int64((1 << frac_bits) - 1)
    shift = np.int64(frac_bits)
    ah, al = a >> shift, a & mask
    bh, bl = b >> shift, b & mask
    with np.errstate(over="ignore"):
        return ((ah @ bh) << shift) + ah @ bl + al @ bh + ((al @ bl) >> shift)


def _check_products(a: np.ndarray, b: np.ndarray, frac_bits: int) -> None:
    scale = float(1 << frac_bits)
    magnitude = np.abs(a.astype(np.float64) / scale) * np.abs(b.astype(np.float64) / scale)
    if magnitude.size and np.max(magnitude) >= _bound(frac_bits):
        raise FixedPointOverflowError("elementwise product leaves the ring range")


def mul_truncate_vec(a: FixedVec, b: FixedVec) -> FixedVec:
    f = _same_frac(a, b)
    _same_length(a, b)
    if _overflow_checks:
        _check_products(a.signed, b.signed, f)
    return FixedVec(mul_shift(a.signed, b.signed, f).view(np.uint64), f)


def matmul_truncate(a: np.ndarray, b: np.ndarray, frac_bits: int = DEFAULT_FRAC_BITS) -> np.ndarray:
    """Fixed-point matrix product over int64 (signed raw) matrices."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape[-1] != b.shape[0]:
        raise LengthMismatchError(f"matmul shapes {a.shape} and {b.shape} do not compose")
    out = matmul_shift(a, b, frac_bits)
    if _overflow_checks:
        approx = (a.astype(np.float64) @ b.astype(np.float64)) / float(1 << (2 * frac_bits))
        if approx.size and np.max(np.abs(approx)) >= _bound(frac_bits):
            raise FixedPointOverflowError("matrix product leaves the ring range")
    return out
