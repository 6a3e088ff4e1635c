"""Bit-exact emulation of the device's arithmetic kernels.

Every kernel returns ``(value, cycles)``. Values are exact; the cycle counts
follow data-dependent control flow so the same leakage channels exist as on
the emulated micro-controllers:

* float multiply: shift-and-add over the 8-bit significands ``1.f7`` of the
  two operands; timing depends only on the two 7-bit fractions;
* float ReLU: three classes (positive / zero / negative);
* integer-to-float: normalization loop whose trip count is ``7 - e``;
* fixed ReLU: two classes split on the sign bit;
* division by 255: restoring division, long step for each 1 quotient bit;
* binary MAC: conditional negation for ``wt = -1``;
* zero-skipping MAC: short path for a zero input.

The float multiplier consumes truncated 8-bit significands and produces the
exact 16-bit significand product, which a float32 always holds. Additions are
float32 round-to-nearest-even. Denormal results flush to zero.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

from .profiles import CostProfile

FRAC_BITS = 23
FRAC_MASK = (1 << FRAC_BITS) - 1
EXP_BIAS = 127
MANT7_SHIFT = FRAC_BITS - 7
SIG_BITS = 24


class EncodingError(ValueError):
    """NaN, infinity and denormal encodings are not part of the workbench."""


class FixedOverflowError(ArithmeticError):
    pass


@dataclass(frozen=True)
class FloatRepr:
    sign: int
    biased_exponent: int
    mantissa_frac: int

    def __post_init__(self) -> None:
        if self.sign not in (0, 1):
            raise EncodingError(f"sign bit must be 0 or 1, got {self.sign}")
        if not 0 <= self.biased_exponent <= 255:
            raise EncodingError(f"biased exponent out of range: {self.biased_exponent}")
        if not 0 <= self.mantissa_frac <= FRAC_MASK:
            raise EncodingError(f"mantissa out of range: {self.mantissa_frac}")
        if self.biased_exponent == 255:
            raise EncodingError("NaN/Inf encodings are rejected")
        if self.biased_exponent == 0:
            if self.mantissa_frac:
                raise EncodingError("denormal encodings are rejected")
            if self.sign:
                raise EncodingError("zero must use the canonical all-zero encoding")

    @classmethod
    def from_bits(cls, bits: int) -> "FloatRepr":
        return cls((bits >> 31) & 1, (bits >> FRAC_BITS) & 0xFF, bits & FRAC_MASK)

    @classmethod
    def from_float(cls, x: float) -> "FloatRepr":
        """Encode ``x`` as float32 (round-to-nearest-even); -0.0 becomes +0."""
        if not math.isfinite(x):
            raise EncodingError(f"non-finite value {x!r}")
        try:
            (bits,) = struct.unpack(">I", struct.pack(">f", x))
        except OverflowError:
            raise EncodingError(f"{x!r} overflows float32") from None
        if bits & 0x7FFFFFFF == 0:
            return ZERO
        return cls.from_bits(bits)

    def to_bits(self) -> int:
        return (self.sign << 31) | (self.biased_exponent << FRAC_BITS) | self.mantissa_frac

    @property
    def is_zero(self) -> bool:
        return self.biased_exponent == 0

    @property
    def exponent(self) -> int:
        return self.biased_exponent - EXP_BIAS

    @property
    def mantissa7(self) -> "Mantissa7":
        return Mantissa7(self.mantissa_frac >> MANT7_SHIFT)

    @property
    def value(self) -> float:
        if self.is_zero:
            return 0.0
        magnitude = math.ldexp(1.0 + self.mantissa_frac / (1 << FRAC_BITS), self.exponent)
        return -magnitude if self.sign else magnitude

    def __float__(self) -> float:
        return self.value


ZERO = FloatRepr(0, 0, 0)


@dataclass(frozen=True, order=True)
class Mantissa7:
    """The top 7 fraction bits, read as ``1.m = 1 + frac7 / 128``."""

    frac7: int

    def __post_init__(self) -> None:
        if not 0 <= self.frac7 <= 127:
            raise ValueError(f"frac7 out of range: {self.frac7}")

    @property
    def value(self) -> float:
        return 1.0 + self.frac7 / 128

    @property
    def significand(self) -> int:
        return 128 + self.frac7

    @classmethod
    def of(cls, x: float | FloatRepr) -> "Mantissa7":
        rep = x if isinstance(x, FloatRepr) else FloatRepr.from_float(x)
        if rep.is_zero:
            raise ValueError("zero has no mantissa")
        return rep.mantissa7

    def to_repr(self, exponent: int = 0, sign: int = 0) -> FloatRepr:
        return FloatRepr(sign, exponent + EXP_BIAS, self.frac7 << MANT7_SHIFT)


@dataclass(frozen=True)
class FixedQ:
    raw: int
    frac_bits: int = 0

    def __post_init__(self) -> None:
        if self.frac_bits < 0:
            raise ValueError("frac_bits must be >= 0")

    @property
    def value(self) -> float:
        return self.raw / (1 << self.frac_bits)


# --------------------------------------------------------------------------
# float helpers


def round_to_f32(sign: int, magnitude: int, exp2: int) -> FloatRepr:
    """Round ``(-1)**sign * magnitude * 2**exp2`` to float32, ties to even."""
    if magnitude == 0:
        return ZERO
    shift = magnitude.bit_length() - SIG_BITS
    if shift > 0:
        kept = magnitude >> shift
        rest = magnitude & ((1 << shift) - 1)
        half = 1 << (shift - 1)
        if rest > half or (rest == half and kept & 1):
            kept += 1
            if kept >> SIG_BITS:
                kept >>= 1
                shift += 1
        magnitude, exp2 = kept, exp2 + shift
    else:
        magnitude, exp2 = magnitude << -shift, exp2 + shift
    biased = exp2 + SIG_BITS - 1 + EXP_BIAS
    if biased <= 0:
        return ZERO
    if biased >= 255:
        raise OverflowError("float32 overflow")
    return FloatRepr(sign, biased, magnitude & FRAC_MASK)


def _unpack(x: FloatRepr) -> tuple[int, int]:
    """(24-bit significand, exponent of its LSB)."""
    return (1 << FRAC_BITS) | x.mantissa_frac, x.exponent - FRAC_BITS


# --------------------------------------------------------------------------
# multiply


def shift_add_multiply(multiplier: int, multiplicand: int, profile: CostProfile) -> tuple[int, int]:
    """8x8 right-shift accumulate multiply of two significands in 128..255.

    Each set multiplier bit costs an add, plus a carry penalty when the add
    overflows the high byte. After the loop the product is normalized when it
    reaches 2.0 and the guard/sticky bits of the 8-bit result are tested.
    """
    hi = lo = 0
    cycles = profile.fmul_base
    for i in range(8):
        if (multiplier >> i) & 1:
            hi += multiplicand
            cycles += profile.fmul_add
            if hi > 0xFF:
                cycles += profile.fmul_carry
        lo = (lo >> 1) | ((hi & 1) << 7)
        hi >>= 1
        cycles += profile.fmul_shift
    product = (hi << 8) | lo
    guard_at = 7
    if product >> 15:
        cycles += profile.fmul_norm
        guard_at = 8
    if (product >> (guard_at - 1)) & 1:
        cycles += profile.fmul_round
    if product & ((1 << (guard_at - 1)) - 1):
        cycles += profile.fmul_sticky
    return product, cycles


@lru_cache(maxsize=16)
def mul_cycle_table(profile: CostProfile) -> tuple[tuple[int, ...], ...]:
    """``table[i][w]`` = multiply cycles for input fraction i and weight fraction w."""
    return tuple(
        tuple(shift_add_multiply(128 + i, 128 + w, profile)[1] for w in range(128))
        for i in range(128)
    )


def leaky_float_mul(a: FloatRepr, b: FloatRepr, profile: CostProfile) -> tuple[FloatRepr, int]:
    """Multiply ``a`` (input operand, scanned) by ``b`` (weight operand)."""
    if a.is_zero or b.is_zero:
        return ZERO, profile.fmul_zero
    product, cycles = shift_add_multiply(a.mantissa7.significand, b.mantissa7.significand, profile)
    return round_to_f32(a.sign ^ b.sign, product, a.exponent + b.exponent - 14), cycles


# --------------------------------------------------------------------------
# add


def leaky_float_add(a: FloatRepr, b: FloatRepr, profile: CostProfile) -> tuple[FloatRepr, int]:
    if a.is_zero:
        return b, profile.fadd_base
    if b.is_zero:
        return a, profile.fadd_base
    gap = min(abs(a.exponent - b.exponent), 25)
    cycles = profile.fadd_base + gap * profile.fadd_shift
    sa, ea = _unpack(a)
    sb, eb = _unpack(b)
    low = min(ea, eb)
    total = (-sa if a.sign else sa) << (ea - low)
    total += (-sb if b.sign else sb) << (eb - low)
    return round_to_f32(1 if total < 0 else 0, abs(total), low), cycles


# --------------------------------------------------------------------------
# activations and conversions


def leaky_float_relu(pa: FloatRepr, profile: CostProfile) -> tuple[FloatRepr, int]:
    if pa.is_zero:
        return ZERO, profile.frelu_zero
    if pa.sign:
        return ZERO, profile.frelu_neg
    return pa, profile.frelu_pos


def int2float_cycles(ip: int, profile: CostProfile) -> int:
    if profile.i2f_constant_time:
        return profile.i2f_base + 7 * profile.i2f_iter
    if ip == 0:
        return profile.i2f_zero
    return profile.i2f_base + profile.i2f_iter * (7 - (ip.bit_length() - 1))


def leaky_int2float(ip: int, profile: CostProfile) -> tuple[FloatRepr, int]:
    """Convert an 8-bit unsigned integer, normalizing by repeated doubling."""
    if not 0 <= ip <= 255:
        raise ValueError(f"input must be in 0..255, got {ip}")
    if ip == 0:
        return ZERO, int2float_cycles(0, profile)
    exponent, z = 7, ip
    while z < 128:
        z <<= 1
        exponent -= 1
    return round_to_f32(0, z, exponent - 7), int2float_cycles(ip, profile)


def fixed_mac(acc: FixedQ, ip: FixedQ, wt: FixedQ, profile: CostProfile,
              acc_bits: int = 32) -> tuple[FixedQ, int]:
    if acc.frac_bits != ip.frac_bits + wt.frac_bits:
        raise ValueError("accumulator scale must equal product scale")
    raw = acc.raw + ip.raw * wt.raw
    if not -(1 << (acc_bits - 1)) <= raw < (1 << (acc_bits - 1)):
        raise FixedOverflowError(f"{acc_bits}-bit accumulator overflow")
    return FixedQ(raw, acc.frac_bits), profile.fixed_mac


def fixed_relu(pa: FixedQ, profile: CostProfile) -> tuple[FixedQ, int]:
    if pa.raw >= 0:
        return pa, profile.fixed_relu_nonneg
    return FixedQ(0, pa.frac_bits), profile.fixed_relu_neg


def div255_steps(ip: int) -> tuple[int, list[int]]:
    """Restoring division ip/255 to 16 quotient bits (Q0.15). Returns (raw, bits)."""
    if not 0 <= ip <= 255:
        raise ValueError(f"input must be in 0..255, got {ip}")
    dividend = ip << 15
    remainder = dividend >> 16
    bits = []
    for j in range(15, -1, -1):
        remainder = (remainder << 1) | ((dividend >> j) & 1)
        if remainder >= 255:
            remainder -= 255
            bits.append(1)
        else:
            bits.append(0)
    raw = 0
    for bit in bits:
        raw = (raw << 1) | bit
    return raw, bits


def div_bit_durations(bits: list[int], profile: CostProfile) -> list[int]:
    if profile.div_constant_time:
        return [profile.div_long] * len(bits)
    return [profile.div_long if bit else profile.div_short for bit in bits]


def leaky_normalize_div255(ip: int, profile: CostProfile) -> tuple[FixedQ, list[int]]:
    """Normalize to Q0.15; the per-bit step durations are the SPA view."""
    raw, bits = div255_steps(ip)
    return FixedQ(raw, 15), div_bit_durations(bits, profile)


def bnn_mac(acc: int, ip: int, wt: int, profile: CostProfile) -> tuple[int, int]:
    if wt == 1:
        return acc + ip, profile.bnn_base
    if wt == -1:
        return acc - ip, profile.bnn_base + profile.bnn_negate
    raise ValueError(f"binary weight must be +1 or -1, got {wt}")


def zero_skip_mac(acc, ip, wt, profile: CostProfile, mac):
    """Skip the multiply (and the weight fetch) when the input is zero.

    ``mac`` is the precision's own MAC ``(acc, ip, wt, profile) -> (acc, cycles)``.
    """
    is_zero = ip.is_zero if isinstance(ip, FloatRepr) else (
        ip.raw == 0 if isinstance(ip, FixedQ) else ip == 0)
    if is_zero:
        return acc, profile.skip_cost
    return mac(acc, ip, wt, profile)


def float_mac(acc: FloatRepr, ip: FloatRepr, wt: FloatRepr,
              profile: CostProfile) -> tuple[FloatRepr, int]:
    product, mul_cycles = leaky_float_mul(ip, wt, profile)
    total, add_cycles = leaky_float_add(acc, product, profile)
    return total, mul_cycles + add_cycles
