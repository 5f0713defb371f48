"""Adaptive 8-bit floating point and the fixed-point VMAC datapath.

Code layout (MSB to LSB): 1 sign bit, ``exponent_bits`` exponent field,
``7 - exponent_bits`` mantissa bits. A code decodes to

    (-1)^s * 2^(e + exponent_bias) * (1 + m / 2^M)

except that magnitude field 0 (e = 0, m = 0) is sacrificed for zero, so there
are no subnormals. 0x00 is the canonical zero code; 0x80 decodes to -0.0.
There are no infinities or NaNs: out-of-range values saturate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

TOTAL_BITS = 8
ZERO_CODE = 0x00
SIGN_MASK = 0x80


class InvalidInput(ValueError):
    """Raised for non-finite or otherwise unusable numeric input."""


@dataclass(frozen=True)
class FloatFormat:
    exponent_bits: int = 4
    exponent_bias: int = 0
    total_bits: int = TOTAL_BITS

    def __post_init__(self):
        if self.total_bits != TOTAL_BITS:
            raise ValueError("only 8-bit words are supported")
        if not 1 <= self.exponent_bits <= 6:
            raise ValueError(f"exponent_bits must be in 1..6, got {self.exponent_bits}")

    @property
    def mantissa_bits(self) -> int:
        return self.total_bits - 1 - self.exponent_bits

    @property
    def max_exponent_field(self) -> int:
        return (1 << self.exponent_bits) - 1

    @property
    def max_value(self) -> float:
        m = self.mantissa_bits
        return math.ldexp(2.0 - 2.0 ** -m, self.max_exponent_field + self.exponent_bias)

    @property
    def min_value(self) -> float:
        """Smallest positive representable magnitude."""
        return math.ldexp(1.0 + 2.0 ** -self.mantissa_bits, self.exponent_bias)

    def with_bias(self, bias: int) -> "FloatFormat":
        return FloatFormat(self.exponent_bits, int(bias), self.total_bits)

    def decode_table(self) -> np.ndarray:
        return _decode_table(self.exponent_bits, self.exponent_bias)


@lru_cache(maxsize=512)
def _decode_table(exponent_bits: int, exponent_bias: int) -> np.ndarray:
    m_bits = TOTAL_BITS - 1 - exponent_bits
    codes = np.arange(256)
    sign = np.where(codes & SIGN_MASK, -1.0, 1.0)
    mag = codes & 0x7F
    e = mag >> m_bits
    m = mag & ((1 << m_bits) - 1)
    values = sign * np.ldexp(1.0 + m / float(1 << m_bits), e + exponent_bias)
    values[mag == 0] = 0.0
    values[0x80] = -0.0
    values.flags.writeable = False
    return values


@dataclass(frozen=True)
class QuantTensor:
    """Dense tensor of 8-bit codes sharing one exponent bias."""

    codes: np.ndarray
    format: FloatFormat

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.uint8)
        if codes.flags.writeable:
            codes = codes.copy()
            codes.flags.writeable = False
        object.__setattr__(self, "codes", codes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape

    @property
    def size(self) -> int:
        return self.codes.size

    def values(self) -> np.ndarray:
        return dequantize(self)

    def reshape(self, *shape) -> "QuantTensor":
        return QuantTensor(self.codes.reshape(*shape), self.format)

    def __getitem__(self, idx) -> "QuantTensor":
        return QuantTensor(self.codes[idx], self.format)

    @property
    def T(self) -> "QuantTensor":
        return QuantTensor(self.codes.T, self.format)


def fit_exponent_bias(values, fmt: FloatFormat) -> int:
    """Smallest bias for which ``max(|values|)`` does not overflow ``fmt``."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InvalidInput("cannot fit an exponent bias to an empty array")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("non-finite value in input")
    peak = float(np.max(np.abs(arr)))
    if peak == 0.0:
        return 0
    top = 2.0 - 2.0 ** -fmt.mantissa_bits
    # max_value(bias) = top * 2^(emax + bias) >= peak
    bias = math.ceil(math.log2(peak / top)) - fmt.max_exponent_field
    # log2 can be off by one ulp at binade boundaries
    while math.ldexp(top, fmt.max_exponent_field + bias - 1) >= peak:
        bias -= 1
    while math.ldexp(top, fmt.max_exponent_field + bias) < peak:
        bias += 1
    return bias


def quantize(values, fmt: FloatFormat) -> QuantTensor:
    """Round-to-nearest-even onto the format grid, saturating at the extremes."""
    x = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInput("non-finite value in input")
    m_bits = fmt.mantissa_bits
    emax = fmt.max_exponent_field
    ax = np.abs(x)

    frac, exp = np.frexp(ax)  # ax = frac * 2^exp, frac in [0.5, 1)
    e_field = exp - 1 - fmt.exponent_bias
    mant = np.rint((frac * 2.0 - 1.0) * (1 << m_bits)).astype(np.int64)
    carry = mant == (1 << m_bits)
    mant = np.where(carry, 0, mant)
    e_field = np.where(carry, e_field + 1, e_field)
    mag = (e_field.astype(np.int64) << m_bits) | mant

    min_v = fmt.min_value
    max_mag = 0x7F
    mag = np.where(e_field > emax, max_mag, mag)
    # below the smallest normal the neighbours are 0 and min_value; ties go to 0
    mag = np.where(ax < min_v, np.where(ax > 0.5 * min_v, 1, 0), mag)
    mag = np.clip(mag, 0, max_mag)

    negative = np.signbit(x) & ((mag != 0) | (x == 0.0))
    codes = (mag | np.where(negative, SIGN_MASK, 0)).astype(np.uint8)
    return QuantTensor(codes, fmt)


def quantize_fit(values, exponent_bits: int = 4) -> QuantTensor:
    """Quantize with a per-tensor bias fitted to the data."""
    base = FloatFormat(exponent_bits)
    return quantize(values, base.with_bias(fit_exponent_bias(values, base)))


def dequantize(q: QuantTensor) -> np.ndarray:
    return q.format.decode_table()[q.codes]


def is_zero_code(codes) -> np.ndarray:
    return np.asarray(codes) == ZERO_CODE


@dataclass(frozen=True)
class Accumulator:
    """Saturating signed 32-bit fixed-point accumulator."""

    raw: int = 0
    integer_bits: int = 16
    fractional_bits: int = 16

    def __post_init__(self):
        if self.integer_bits + self.fractional_bits != 32:
            raise ValueError("integer_bits + fractional_bits must equal 32")

    @property
    def lsb(self) -> float:
        return 2.0 ** -self.fractional_bits

    @property
    def value(self) -> float:
        return self.raw * self.lsb

    def add_raw(self, delta: int) -> "Accumulator":
        return Accumulator(_saturate(self.raw + int(delta)), self.integer_bits, self.fractional_bits)

    @classmethod
    def from_value(cls, value: float, integer_bits: int = 16, fractional_bits: int = 16):
        raw = _saturate(int(np.rint(value * 2.0**fractional_bits)))
        return cls(raw, integer_bits, fractional_bits)


ACC_MIN = -(1 << 31)
ACC_MAX = (1 << 31) - 1


def _saturate(raw: int) -> int:
    return min(max(raw, ACC_MIN), ACC_MAX)


def vmac(a: QuantTensor, b: QuantTensor, acc: Accumulator) -> tuple[Accumulator, bool]:
    """One vector MAC: ``acc + sum(a_i * b_i)``.

    The product-sum is formed exactly, rounded once onto the accumulator grid
    and added with saturation. The returned flag is True when either operand
    is entirely zero codes, in which case the datapath is gated and ``acc`` is
    returned untouched.
    """
    if a.shape != b.shape or a.codes.ndim != 1:
        raise ValueError(f"vmac needs equal-length vectors, got {a.shape} and {b.shape}")
    if a.format.exponent_bits != b.format.exponent_bits:
        raise ValueError("operand formats differ")
    if np.all(is_zero_code(a.codes)) or np.all(is_zero_code(b.codes)):
        return acc, True
    exact = math.fsum((dequantize(a) * dequantize(b)).tolist())
    delta = int(np.rint(exact * 2.0**acc.fractional_bits))
    return acc.add_raw(delta), False


@dataclass
class MatmulStats:
    cycles: int = 0
    vmacs: int = 0
    vmacs_skipped: int = 0
    macs: int = 0
    shape: tuple[int, int, int] = field(default=(0, 0, 0))


def tile_cycles(rows: int, inner: int, cols: int, tile_n: int) -> int:
    """PU cycles for one matmul: n^3 MACs per n cycles on each tile triple."""
    t = lambda d: -(-d // tile_n)
    return t(rows) * t(cols) * t(inner) * tile_n


def _pad_to(x: np.ndarray, rows: int, cols: int) -> np.ndarray:
    if x.shape == (rows, cols):
        return x
    out = np.zeros((rows, cols), dtype=x.dtype)
    out[: x.shape[0], : x.shape[1]] = x
    return out


def matmul_tiled(
    A: QuantTensor,
    B: QuantTensor,
    tile_n: int = 16,
    *,
    skip_zero: bool = True,
    out_exponent_bits: int | None = None,
    frac_bits: int = 16,
    return_accumulator: bool = False,
):
    """Tiled PU matmul.

    Each VMAC forms an exact length-``tile_n`` product-sum, rounds it onto the
    32-bit fixed-point grid and adds it to its output accumulator with
    saturation. The accumulated matrix is quantized back to 8 bits with a
    fitted bias. Returns ``(result, cycles, skipped)``; with
    ``return_accumulator`` the dequantized accumulator values and a
    ``MatmulStats`` are returned instead of the bare counts.

    Exactness of the per-VMAC sums in float64 holds for exponent_bits <= 4.
    """
    if A.codes.ndim != 2 or B.codes.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {A.shape} x {B.shape}")
    rows, inner = A.shape
    cols = B.shape[1]
    n = tile_n
    rp, kp, cp = (-(-d // n) * n for d in (rows, inner, cols))
    kt = kp // n

    a_codes = _pad_to(A.codes, rp, kp)
    b_codes = _pad_to(B.codes, kp, cp)
    a = A.format.decode_table()[a_codes]
    b = B.format.decode_table()[b_codes]

    # zero-skip flags per VMAC operand segment
    za = np.all(a_codes.reshape(rp, kt, n) == ZERO_CODE, axis=2)  # (rp, kt)
    zb = np.all(b_codes.reshape(kt, n, cp) == ZERO_CODE, axis=1)  # (kt, cp)
    za_cnt = za.sum(axis=0).astype(np.int64)
    zb_cnt = zb.sum(axis=1).astype(np.int64)
    skipped = int(np.sum(za_cnt * cp + zb_cnt * rp - za_cnt * zb_cnt))

    partial = np.matmul(a.reshape(rp, kt, n).transpose(1, 0, 2), b.reshape(kt, n, cp))
    if skip_zero:
        gate = za.T[:, :, None] | zb[:, None, :]
        partial = np.where(gate, 0.0, partial)
    raw_parts = np.rint(partial * 2.0**frac_bits).astype(np.int64)
    acc = np.zeros((rp, cp), dtype=np.int64)
    for k in range(kt):
        acc = np.clip(acc + raw_parts[k], ACC_MIN, ACC_MAX)
    acc_values = acc[:rows, :cols] * 2.0**-frac_bits + 0.0

    e_bits = A.format.exponent_bits if out_exponent_bits is None else out_exponent_bits
    result = quantize_fit(acc_values, e_bits)
    cycles = tile_cycles(rows, inner, cols, n)
    if return_accumulator:
        stats = MatmulStats(
            cycles=cycles,
            vmacs=rp * cp * kt,
            vmacs_skipped=skipped,
            macs=rows * inner * cols,
            shape=(rows, inner, cols),
        )
        return result, acc_values, stats
    return result, cycles, skipped
