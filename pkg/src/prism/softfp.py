"""Bit-exact emulation of the narrow floating-point training formats.

Four formats are modeled: IEEE half (FP16), bfloat16 (BF16) and the two
8-bit formats E4M3 and E5M2.  Values live in host ("wide") precision; this
module pins them to the exact representable set of each format and exposes
the bit-level operations the fault injector needs.

Conventions:
 - Bit index 0 is the least significant mantissa bit; the sign occupies
   the top bit (``width - 1``).
 - ``encode`` rounds to nearest, ties to even.  Finite values whose
   magnitude exceeds ``max_finite`` saturate to +/-max_finite, so
   quantization never manufactures an infinity.  Corrupted bit patterns
   are decoded as-is: a flip may well produce Inf or NaN, and that is the
   point.
 - E4M3 has no infinity; its single NaN pattern is exponent and mantissa
   all ones.  A true Inf entering E4M3 encodes to NaN so that
   non-finiteness is never silently discarded.
 - Every NaN payload canonicalizes to one fixed quiet pattern per format.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

__all__ = [
    "FlipMode",
    "PatternClass",
    "FormatSpec",
    "BitPattern",
    "FP16",
    "BF16",
    "FP8_E4M3",
    "FP8_E5M2",
    "FORMATS",
    "get_format",
    "encode",
    "decode",
    "encode_array",
    "decode_array",
    "round_array",
    "classify_pattern",
    "apply_bit_ops",
]


class FlipMode(str, enum.Enum):
    """What a fault does to one bit."""

    FLIP = "flip"
    STUCK0 = "stuck0"
    STUCK1 = "stuck1"


class PatternClass(str, enum.Enum):
    ZERO = "zero"
    SUBNORMAL = "subnormal"
    NORMAL = "normal"
    INF = "inf"
    NAN = "nan"


# ── format descriptions ──────────────────────────────────────────────


@dataclass(frozen=True)
class FormatSpec:
    """Static description of one storage format."""

    name: str
    exp_bits: int
    man_bits: int
    bias: int
    has_infinity: bool

    @property
    def width(self) -> int:
        return 1 + self.exp_bits + self.man_bits

    @property
    def max_finite(self) -> float:
        if self.has_infinity:
            # largest normal: exponent emax-1, mantissa all ones
            return float((2 - 2.0 ** -self.man_bits) * 2.0 ** (2**self.exp_bits - 2 - self.bias))
        # E4M3 style: all-ones exponent is finite except the all-ones mantissa
        man_max = (1 << self.man_bits) - 2  # one below the NaN mantissa
        return float((1 + man_max * 2.0 ** -self.man_bits) * 2.0 ** (2**self.exp_bits - 1 - self.bias))

    @property
    def min_normal(self) -> float:
        return 2.0 ** (1 - self.bias)

    @property
    def canonical_nan(self) -> int:
        emax = (1 << self.exp_bits) - 1
        if self.has_infinity:
            return (emax << self.man_bits) | (1 << (self.man_bits - 1))
        return (emax << self.man_bits) | ((1 << self.man_bits) - 1)

    @property
    def max_finite_bits(self) -> int:
        if self.has_infinity:
            return (((1 << self.exp_bits) - 2) << self.man_bits) | ((1 << self.man_bits) - 1)
        return (((1 << self.exp_bits) - 1) << self.man_bits) | ((1 << self.man_bits) - 2)


FP16 = FormatSpec("fp16", exp_bits=5, man_bits=10, bias=15, has_infinity=True)
BF16 = FormatSpec("bf16", exp_bits=8, man_bits=7, bias=127, has_infinity=True)
FP8_E4M3 = FormatSpec("fp8_e4m3", exp_bits=4, man_bits=3, bias=7, has_infinity=False)
FP8_E5M2 = FormatSpec("fp8_e5m2", exp_bits=5, man_bits=2, bias=15, has_infinity=True)

FORMATS: dict[str, FormatSpec] = {s.name: s for s in (FP16, BF16, FP8_E4M3, FP8_E5M2)}

_ALIASES = {
    "fp16": "fp16",
    "float16": "fp16",
    "half": "fp16",
    "bf16": "bf16",
    "bfloat16": "bf16",
    "fp8_e4m3": "fp8_e4m3",
    "e4m3": "fp8_e4m3",
    "fp8_e5m2": "fp8_e5m2",
    "e5m2": "fp8_e5m2",
}


def get_format(name: str) -> FormatSpec:
    """Look up a format by name; dashes, case and common aliases accepted."""
    key = name.strip().lower().replace("-", "_")
    if key not in _ALIASES:
        raise ValueError(f"unknown float format {name!r} (have: {sorted(_ALIASES)})")
    return FORMATS[_ALIASES[key]]


class BitPattern(NamedTuple):
    """One encoded value: raw bits plus the format they belong to."""

    bits: int
    spec: FormatSpec


# ── decode ───────────────────────────────────────────────────────────

_DECODE_TABLES: dict[str, np.ndarray] = {}


def _build_decode_table(spec: FormatSpec) -> np.ndarray:
    b = np.arange(1 << spec.width, dtype=np.uint32)
    e = (b >> spec.man_bits) & ((1 << spec.exp_bits) - 1)
    m = (b & ((1 << spec.man_bits) - 1)).astype(np.float64)
    sign = np.where((b >> (spec.width - 1)) & 1, -1.0, 1.0)
    emax = (1 << spec.exp_bits) - 1

    sub = m * 2.0 ** (1 - spec.bias - spec.man_bits)
    norm = (1.0 + m * 2.0**-spec.man_bits) * np.exp2(e.astype(np.float64) - spec.bias)
    val = sign * np.where(e == 0, sub, norm)
    if spec.has_infinity:
        val[(e == emax) & (m == 0)] = sign[(e == emax) & (m == 0)] * np.inf
        val[(e == emax) & (m > 0)] = np.nan
    else:
        val[(e == emax) & (m == (1 << spec.man_bits) - 1)] = np.nan
    return val


def decode_array(bits: np.ndarray, spec: FormatSpec) -> np.ndarray:
    """Decode an integer array of bit patterns to float64 values."""
    table = _DECODE_TABLES.get(spec.name)
    if table is None:
        table = _DECODE_TABLES[spec.name] = _build_decode_table(spec)
    return table[np.asarray(bits, dtype=np.int64)]


def decode(pattern: BitPattern) -> float:
    bits, spec = pattern
    if not 0 <= bits < (1 << spec.width):
        raise ValueError(f"bits 0x{bits:x} out of range for {spec.name}")
    return float(decode_array(np.asarray([bits]), spec)[0])


# ── encode ───────────────────────────────────────────────────────────


def encode_array(values: np.ndarray, spec: FormatSpec) -> np.ndarray:
    """Round-to-nearest-even encode of real values to bit patterns (uint16).

    Works directly off the float64 bit representation, so there is no
    double rounding through an intermediate precision.
    """
    x = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
    u = x.view(np.uint64)
    one = np.uint64(1)

    sign = (u >> np.uint64(63)).astype(np.uint64)
    e11 = ((u >> np.uint64(52)) & np.uint64(0x7FF)).astype(np.int64)
    m52 = u & np.uint64((1 << 52) - 1)

    E, M, B = spec.exp_bits, spec.man_bits, spec.bias
    W = spec.width
    sbit = sign << np.uint64(W - 1)
    emax = (1 << E) - 1

    nan_in = (e11 == 0x7FF) & (m52 != 0)
    inf_in = (e11 == 0x7FF) & (m52 == 0)
    zero_in = (e11 == 0) & (m52 == 0)
    # float64 subnormals sit far below every format's grid: they round to zero
    tiny_in = (e11 == 0) & (m52 != 0)
    sat = ~nan_in & ~inf_in & (np.abs(x) > spec.max_finite)

    te = e11 - 1023 + B  # target biased exponent

    # normal path (te >= 1): round the 52-bit mantissa down to M bits
    shift = 52 - M
    keep = m52 >> np.uint64(shift)
    rem = m52 & np.uint64((1 << shift) - 1)
    half = np.uint64(1 << (shift - 1))
    up = (rem > half) | ((rem == half) & ((keep & one) == one))
    keep = keep + up.astype(np.uint64)
    ovf = keep == np.uint64(1 << M)
    keep = np.where(ovf, np.uint64(0), keep)
    ten = np.clip(te + ovf.astype(np.int64), 0, emax).astype(np.uint64)
    normal_bits = sbit | (ten << np.uint64(M)) | keep

    # subnormal path (te <= 0): round the full 53-bit significand at the
    # subnormal quantum.  A round up to 1<<M rolls into the minimum normal
    # encoding by construction.
    sig53 = m52 | (one << np.uint64(52))
    s2 = np.clip(53 - M - te, 1, 54).astype(np.uint64)
    kq = sig53 >> s2
    mask = (one << s2) - one
    rem2 = sig53 & mask
    half2 = one << (s2 - one)
    up2 = (rem2 > half2) | ((rem2 == half2) & ((kq & one) == one))
    sub_bits = sbit | (kq + up2.astype(np.uint64))

    if spec.has_infinity:
        inf_bits = sbit | np.uint64(emax << M)
    else:
        inf_bits = np.full_like(sbit, spec.canonical_nan)

    out = np.select(
        [nan_in, inf_in, zero_in | tiny_in, sat, te >= 1],
        [np.uint64(spec.canonical_nan), inf_bits, sbit,
         sbit | np.uint64(spec.max_finite_bits), normal_bits],
        default=sub_bits,
    )
    return out.astype(np.uint16).reshape(np.shape(values))


def encode(value: float, spec: FormatSpec) -> BitPattern:
    """Encode one real value (finite, NaN or +/-Inf) to a bit pattern."""
    bits = int(encode_array(np.asarray([value], dtype=np.float64), spec)[0])
    return BitPattern(bits, spec)


# ── value-level rounding ─────────────────────────────────────────────


def round_array(values: np.ndarray, spec: FormatSpec) -> np.ndarray:
    """Elementwise encode/decode through the format, preserving dtype.

    This is the quantization workhorse: an exact round-to-nearest-even to
    the format's value grid done with frexp/rint, bit-identical to
    ``decode_array(encode_array(x))`` but without materializing patterns.
    """
    x = np.asarray(values)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    p = spec.man_bits + 1
    m, e = np.frexp(x)
    with np.errstate(invalid="ignore", over="ignore"):
        y = np.ldexp(np.rint(np.ldexp(m, p)), e - p)
        a = np.abs(x)
        # below the normal range the grid spacing is a fixed quantum
        tiny = a < spec.min_normal
        if tiny.any():
            q = 1 - spec.bias - spec.man_bits
            y = np.where(tiny, np.ldexp(np.rint(np.ldexp(x, -q)), q), y)
        inf_in = np.isinf(x)
        big = (a > spec.max_finite) & ~inf_in  # NaN compares false already
        if big.any():
            y = np.where(big, np.copysign(np.asarray(spec.max_finite, dtype=y.dtype), x), y)
        if not spec.has_infinity and inf_in.any():
            y = np.where(inf_in, np.nan, y)
    return y


# ── pattern classification and bit surgery ───────────────────────────


def classify_pattern(pattern: BitPattern) -> PatternClass:
    """Class of a bit pattern: zero, subnormal, normal, inf or nan."""
    bits, spec = pattern
    e = (bits >> spec.man_bits) & ((1 << spec.exp_bits) - 1)
    m = bits & ((1 << spec.man_bits) - 1)
    emax = (1 << spec.exp_bits) - 1
    if spec.has_infinity and e == emax:
        return PatternClass.NAN if m else PatternClass.INF
    if not spec.has_infinity and e == emax and m == (1 << spec.man_bits) - 1:
        return PatternClass.NAN
    if e == 0:
        return PatternClass.SUBNORMAL if m else PatternClass.ZERO
    return PatternClass.NORMAL


def apply_bit_ops(pattern: BitPattern, ops: Iterable[tuple[int, FlipMode]]) -> BitPattern:
    """Apply (bit index, op) pairs to a pattern.  Indices count from the LSB."""
    bits, spec = pattern
    for idx, mode in ops:
        if not 0 <= idx < spec.width:
            raise ValueError(f"bit index {idx} out of range for {spec.name}")
        bit = 1 << idx
        mode = FlipMode(mode)
        if mode is FlipMode.FLIP:
            bits ^= bit
        elif mode is FlipMode.STUCK0:
            bits &= ~bit
        else:
            bits |= bit
    return BitPattern(bits, spec)
