"""Bit-exact software emulation of the reduced-precision number formats.

Three formats live here:

* FloatSD8 -- an 8-bit weight format made of a 3-bit exponent field and a
  5-bit code for a two-group signed-digit mantissa (a 3-digit most
  significant group worth ``msg * 4`` plus a 2-digit second group worth
  ``sg``).  Each group holds at most one nonzero digit, so the mantissa
  integer ``msg*4 + sg`` takes only 31 distinct values and any product
  against a FloatSD8 weight decomposes into at most two partial products.
* FP8 -- a 1-5-2 minifloat (bias 15) with subnormals, round-to-nearest-even
  and saturating overflow (no infinities or NaNs).
* FP16 -- IEEE half precision with the same saturating-overflow policy,
  used for accumulation and master weights.

All quantizers are pure functions of their inputs plus an immutable
:class:`FormatConfig`; everything is safe to call concurrently.  Array
variants operate on float64 ndarrays whose elements are exact grid members
of the respective format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

__all__ = [
    "SDGroup",
    "FloatSD8Weight",
    "FP8Value",
    "FP16Value",
    "FormatConfig",
    "DEFAULT_CONFIG",
    "ROUND_TIES_AWAY",
    "ROUND_TIES_EVEN",
    "UNDERFLOW_FLUSH",
    "UNDERFLOW_CLAMP",
    "sd_group_values",
    "zero_digit_probability",
    "fsd8_enumerate",
    "fsd8_decode",
    "fsd8_quantize",
    "fsd8_quantize_values",
    "fsd8_encode_values",
    "fsd8_decode_bytes",
    "fsd8_partial_products",
    "fsd8_max_value",
    "fsd8_min_positive",
    "fsd8_debug_dump",
    "fp8_quantize",
    "fp8_quantize_values",
    "fp8_encode_values",
    "fp8_decode_bytes",
    "fp8_enumerate",
    "fp16_quantize",
    "fp16_quantize_values",
    "FP8_MAX",
    "FP16_MAX",
    "MANTISSA_VALUES",
    "MANTISSA_MAGNITUDES",
]

ROUND_TIES_AWAY = "nearest-ties-away"
ROUND_TIES_EVEN = "nearest-ties-even"
UNDERFLOW_FLUSH = "flush-to-zero"
UNDERFLOW_CLAMP = "clamp-to-min"


# ---------------------------------------------------------------------------
# Signed-digit groups
# ---------------------------------------------------------------------------

def sd_group_values(digit_count: int) -> list[int]:
    """All legal values of a K-digit signed-digit group, sorted ascending.

    A K-digit group allows at most one nonzero digit, so its value is 0 or
    +/- a power of two below 2**K; there are exactly 2K+1 legal values.
    """
    if not isinstance(digit_count, int) or not 1 <= digit_count <= 8:
        raise ValueError(f"digit_count must be an int in [1, 8], got {digit_count!r}")
    values = [0]
    for j in range(digit_count):
        values.extend((1 << j, -(1 << j)))
    return sorted(values)


def zero_digit_probability(digit_count: int) -> Fraction:
    """Fraction of zero digits across all legal values of a K-digit group.

    Equals (2K-1)/(2K+1) exactly: of the 2K+1 values, 2K have exactly one
    nonzero digit, so (2K+1)*K digit slots contain 2K nonzero digits.
    """
    if not isinstance(digit_count, int) or digit_count < 1:
        raise ValueError(f"digit_count must be a positive int, got {digit_count!r}")
    k = digit_count
    return Fraction(2 * k - 1, 2 * k + 1)


@dataclass(frozen=True)
class SDGroup:
    """A K-digit signed-digit field holding at most one nonzero digit."""

    digit_count: int
    value: int

    def __post_init__(self):
        if self.value not in sd_group_values(self.digit_count):
            raise ValueError(
                f"{self.value} is not a legal {self.digit_count}-digit SD group value"
            )

    def digits(self) -> tuple[int, ...]:
        """The K digits, most significant first, each in {-1, 0, +1}."""
        out = [0] * self.digit_count
        if self.value != 0:
            j = abs(self.value).bit_length() - 1
            out[self.digit_count - 1 - j] = 1 if self.value > 0 else -1
        return tuple(out)


# ---------------------------------------------------------------------------
# FloatSD8 mantissa tables
# ---------------------------------------------------------------------------

MSG_VALUES = tuple(sd_group_values(3))   # (-4, -2, -1, 0, 1, 2, 4)
SG_VALUES = tuple(sd_group_values(2))    # (-2, -1, 0, 1, 2)

#: The 31 distinct mantissa integers msg*4 + sg.
MANTISSA_VALUES = tuple(sorted({m * 4 + s for m in MSG_VALUES for s in SG_VALUES}))

#: Nonnegative mantissa magnitudes, ascending; index into this table is the
#: magnitude part of the 5-bit code.
MANTISSA_MAGNITUDES = tuple(sorted({abs(v) for v in MANTISSA_VALUES}))

_MAGNITUDE_INDEX = {m: i for i, m in enumerate(MANTISSA_MAGNITUDES)}


def _canonical_groups() -> dict[int, tuple[int, int]]:
    # Canonical (msg, sg) per mantissa value: smallest |sg|, then smallest
    # |msg|, so partial-product generation is deterministic.
    table: dict[int, tuple[int, int]] = {}
    for value in MANTISSA_VALUES:
        candidates = [
            (m, s)
            for m in MSG_VALUES
            for s in SG_VALUES
            if m * 4 + s == value
        ]
        table[value] = min(candidates, key=lambda ms: (abs(ms[1]), abs(ms[0]), ms[1], ms[0]))
    return table


_CANONICAL_GROUPS = _canonical_groups()


# ---------------------------------------------------------------------------
# Format configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FormatConfig:
    """Knobs the storage format leaves open.

    ``fsd8_bias`` is fixed for the lifetime of a tensor; every quantizer
    reads it from here.  ``rounding`` picks the FloatSD8 tie rule
    (FP8/FP16 always round ties to even).  ``underflow_policy`` decides what
    a nonzero input smaller than half the least positive value becomes.
    """

    fsd8_bias: int = 9
    rounding: str = ROUND_TIES_AWAY
    underflow_policy: str = UNDERFLOW_FLUSH

    def __post_init__(self):
        if self.rounding not in (ROUND_TIES_AWAY, ROUND_TIES_EVEN):
            raise ValueError(f"unknown rounding mode {self.rounding!r}")
        if self.underflow_policy not in (UNDERFLOW_FLUSH, UNDERFLOW_CLAMP):
            raise ValueError(f"unknown underflow policy {self.underflow_policy!r}")


DEFAULT_CONFIG = FormatConfig()


# ---------------------------------------------------------------------------
# FloatSD8 weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FloatSD8Weight:
    """One 8-bit weight: exponent field plus the two signed-digit groups.

    ``msg`` is the value of the 3-digit most significant group (0, +/-1,
    +/-2, +/-4) and ``sg`` the value of the 2-digit second group (0, +/-1,
    +/-2).  The decoded real value is ``(msg*4 + sg) * 2**(exponent - bias)``.
    """

    exponent: int
    msg: int
    sg: int

    def __post_init__(self):
        if not 0 <= self.exponent <= 7:
            raise ValueError(f"exponent field must be in [0, 7], got {self.exponent}")
        if self.msg not in MSG_VALUES:
            raise ValueError(f"msg must be a 3-digit SD group value, got {self.msg}")
        if self.sg not in SG_VALUES:
            raise ValueError(f"sg must be a 2-digit SD group value, got {self.sg}")

    @property
    def mantissa(self) -> int:
        return self.msg * 4 + self.sg

    @property
    def code(self) -> int:
        """Signed 5-bit mantissa code: index into the magnitude table."""
        m = self.mantissa
        idx = _MAGNITUDE_INDEX[abs(m)]
        return idx if m >= 0 else -idx

    def decode(self, config: FormatConfig = DEFAULT_CONFIG) -> float:
        return math.ldexp(self.mantissa, self.exponent - config.fsd8_bias)

    def to_byte(self) -> int:
        """Pack into 8 bits: 3 exponent bits then the 5-bit two's-complement code."""
        return (self.exponent << 5) | (self.code & 0x1F)

    @classmethod
    def from_code(cls, exponent: int, code: int) -> "FloatSD8Weight":
        if not -15 <= code <= 15:
            raise ValueError(f"mantissa code must be in [-15, 15], got {code}")
        magnitude = MANTISSA_MAGNITUDES[abs(code)]
        mantissa = magnitude if code >= 0 else -magnitude
        msg, sg = _CANONICAL_GROUPS[mantissa]
        return cls(exponent, msg, sg)

    @classmethod
    def from_byte(cls, byte: int) -> "FloatSD8Weight":
        if not 0 <= byte <= 0xFF:
            raise ValueError(f"byte out of range: {byte}")
        exponent = byte >> 5
        code = byte & 0x1F
        if code >= 0x10:
            code -= 0x20
        return cls.from_code(exponent, code)


def fsd8_decode(w: FloatSD8Weight, config: FormatConfig = DEFAULT_CONFIG) -> float:
    """Decoded real value of a FloatSD8 weight."""
    return w.decode(config)


@lru_cache(maxsize=8)
def _grid_for_bias(bias: int):
    values = sorted({
        math.ldexp(m, e - bias) for e in range(8) for m in MANTISSA_VALUES
    })
    grid = np.array(values, dtype=np.float64)
    # Canonical encoding per grid value: smallest exponent field such that
    # the mantissa integer is representable (maximizes significand use).
    encodings = []
    parities = np.zeros(len(values), dtype=np.int64)
    bytes_table = np.zeros(len(values), dtype=np.uint8)
    for i, v in enumerate(values):
        e, m = _encode_exact(v, bias)
        encodings.append((e, m))
        parities[i] = abs(m) & 1
        msg, sg = _CANONICAL_GROUPS[m]
        bytes_table[i] = FloatSD8Weight(e, msg, sg).to_byte()
    decode_table = np.full(256, np.nan)
    for byte in range(256):
        exponent = byte >> 5
        code = byte & 0x1F
        if code == 0x10:
            continue  # the unused -16 pattern
        scode = code - 0x20 if code >= 0x10 else code
        magnitude = MANTISSA_MAGNITUDES[abs(scode)]
        mantissa = magnitude if scode >= 0 else -magnitude
        decode_table[byte] = math.ldexp(mantissa, exponent - bias)
    return grid, tuple(encodings), parities, bytes_table, decode_table


def _encode_exact(value: float, bias: int) -> tuple[int, int]:
    if value == 0.0:
        return 0, 0
    for e in range(8):
        scaled = math.ldexp(value, bias - e)
        if scaled == int(scaled) and int(scaled) in _MANTISSA_SET:
            return e, int(scaled)
    raise ValueError(f"{value!r} is not representable with bias {bias}")


_MANTISSA_SET = frozenset(MANTISSA_VALUES)


def fsd8_enumerate(config: FormatConfig = DEFAULT_CONFIG) -> list[float]:
    """All distinct decoded values, ascending; symmetric about zero."""
    grid, _, _, _, _ = _grid_for_bias(config.fsd8_bias)
    return [float(v) for v in grid]


def fsd8_max_value(config: FormatConfig = DEFAULT_CONFIG) -> float:
    return math.ldexp(MANTISSA_MAGNITUDES[-1], 7 - config.fsd8_bias)


def fsd8_min_positive(config: FormatConfig = DEFAULT_CONFIG) -> float:
    return math.ldexp(1, -config.fsd8_bias)


def fsd8_quantize_values(x, config: FormatConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Round an array to the nearest FloatSD8-representable values.

    Ties follow ``config.rounding`` (away-from-zero picks the larger
    magnitude; ties-even picks the neighbor whose canonical mantissa integer
    is even).  Out-of-range magnitudes clamp to +/-max.  Nonzero inputs that
    would round to zero follow ``config.underflow_policy``.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("fsd8_quantize requires finite inputs")
    grid, _, parities, _, _ = _grid_for_bias(config.fsd8_bias)
    n = len(grid)
    idx = np.searchsorted(grid, x)
    lo = grid[np.clip(idx - 1, 0, n - 1)]
    hi = grid[np.clip(idx, 0, n - 1)]
    pick_hi = (hi - x) < (x - lo)
    result = np.where(pick_hi, hi, lo)
    tie = (hi - x) == (x - lo)
    if np.any(tie):
        if config.rounding == ROUND_TIES_AWAY:
            result = np.where(tie, np.where(x > 0, hi, lo), result)
        else:
            hi_even = parities[np.clip(idx, 0, n - 1)] == 0
            lo_even = parities[np.clip(idx - 1, 0, n - 1)] == 0
            pick = np.where(
                hi_even & ~lo_even, hi,
                np.where(lo_even & ~hi_even, lo, np.where(x > 0, hi, lo)),
            )
            result = np.where(tie, pick, result)
    if config.underflow_policy == UNDERFLOW_CLAMP:
        minpos = fsd8_min_positive(config)
        result = np.where(
            (result == 0.0) & (x != 0.0), np.copysign(minpos, x), result
        )
    return result


def fsd8_quantize(x: float, config: FormatConfig = DEFAULT_CONFIG) -> FloatSD8Weight:
    """Quantize one real to FloatSD8, returning the canonical encoding."""
    if not math.isfinite(x):
        raise ValueError(f"fsd8_quantize requires a finite input, got {x!r}")
    value = float(fsd8_quantize_values(np.array([x]), config)[0])
    e, m = _encode_exact(value, config.fsd8_bias)
    msg, sg = _CANONICAL_GROUPS[m]
    return FloatSD8Weight(e, msg, sg)


def fsd8_encode_values(values, config: FormatConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Map an array of exact grid values to their storage bytes."""
    values = np.asarray(values, dtype=np.float64)
    grid, _, _, bytes_table, _ = _grid_for_bias(config.fsd8_bias)
    idx = np.searchsorted(grid, values)
    idx = np.clip(idx, 0, len(grid) - 1)
    if not np.array_equal(grid[idx], values):
        raise ValueError("input contains values not on the FloatSD8 grid")
    return bytes_table[idx]


def fsd8_decode_bytes(data, config: FormatConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Decode an array of storage bytes back to real values."""
    data = np.asarray(data, dtype=np.uint8)
    _, _, _, _, decode_table = _grid_for_bias(config.fsd8_bias)
    out = decode_table[data]
    if np.any(np.isnan(out)):
        raise ValueError("input contains the unused mantissa code 0x10")
    return out


def fsd8_partial_products(
    w: FloatSD8Weight, config: FormatConfig = DEFAULT_CONFIG
) -> list[tuple[int, int]]:
    """Decompose a weight into at most two signed powers of two.

    Returns (sign, shift) terms with ``sum(sign * 2**shift) == w.decode()``;
    a zero weight returns an empty list.  The MSG term, worth ``msg * 4``,
    comes first.
    """
    base = w.exponent - config.fsd8_bias
    terms: list[tuple[int, int]] = []
    if w.msg != 0:
        j = abs(w.msg).bit_length() - 1
        terms.append((1 if w.msg > 0 else -1, j + 2 + base))
    if w.sg != 0:
        j = abs(w.sg).bit_length() - 1
        terms.append((1 if w.sg > 0 else -1, j + base))
    return terms


def fsd8_debug_dump(config: FormatConfig = DEFAULT_CONFIG) -> list[str]:
    """Text dump of every (exponent, code) pair, one line per encoding."""
    lines = []
    for e in range(8):
        for code in range(-15, 16):
            w = FloatSD8Weight.from_code(e, code)
            lines.append(f"e={e} m={code} → {w.decode(config)!r}")
    return lines


# ---------------------------------------------------------------------------
# Minifloat (FP8 / FP16) emulation
# ---------------------------------------------------------------------------

FP8_MAX = 57344.0          # 1.75 * 2**15
FP16_MAX = 65504.0

_FP8_MAN_BITS = 2
_FP8_MIN_NORMAL_EXP = -14
_FP16_MAN_BITS = 10
_FP16_MIN_NORMAL_EXP = -14


def _round_binary(x: float, man_bits: int, min_normal_exp: int, max_finite: float) -> float:
    # Round-to-nearest-even onto a 1-5-m grid with subnormals; saturating.
    if x == 0.0:
        return 0.0
    a = abs(x)
    _, e = math.frexp(a)                       # a = m * 2**e, m in [0.5, 1)
    step = max(e - 1, min_normal_exp) - man_bits
    k = round(math.ldexp(a, -step))            # exact scaling, banker's rounding
    v = math.ldexp(k, step)
    if v > max_finite:
        v = max_finite
    return math.copysign(v, x)


@dataclass(frozen=True)
class FP8Value:
    """A 1-5-2 minifloat: saturating, subnormal-capable, no inf/NaN."""

    sign: int
    exponent: int   # 5-bit field, 0..30 (31 is never produced)
    mantissa: int   # 2-bit field

    def __post_init__(self):
        if self.sign not in (0, 1):
            raise ValueError("sign must be 0 or 1")
        if not 0 <= self.exponent <= 30:
            raise ValueError(f"exponent field must be in [0, 30], got {self.exponent}")
        if not 0 <= self.mantissa <= 3:
            raise ValueError(f"mantissa field must be in [0, 3], got {self.mantissa}")

    @property
    def value(self) -> float:
        if self.exponent == 0:
            mag = math.ldexp(self.mantissa, -16)
        else:
            mag = math.ldexp(4 + self.mantissa, self.exponent - 17)
        return -mag if self.sign else mag

    def to_byte(self) -> int:
        return (self.sign << 7) | (self.exponent << 2) | self.mantissa

    @classmethod
    def from_byte(cls, byte: int) -> "FP8Value":
        if not 0 <= byte <= 0xFF:
            raise ValueError(f"byte out of range: {byte}")
        return cls((byte >> 7) & 1, (byte >> 2) & 0x1F, byte & 0x3)

    @classmethod
    def from_real(cls, x: float) -> "FP8Value":
        if not math.isfinite(x):
            raise ValueError(f"fp8 quantization requires a finite input, got {x!r}")
        v = _round_binary(x, _FP8_MAN_BITS, _FP8_MIN_NORMAL_EXP, FP8_MAX)
        return cls._from_exact(v)

    @classmethod
    def _from_exact(cls, v: float) -> "FP8Value":
        if v == 0.0:
            return cls(0, 0, 0)
        sign = 1 if v < 0 else 0
        a = abs(v)
        if a < math.ldexp(1, _FP8_MIN_NORMAL_EXP):
            return cls(sign, 0, int(math.ldexp(a, 16)))
        _, e = math.frexp(a)
        sig = int(math.ldexp(a, _FP8_MAN_BITS - (e - 1)))
        return cls(sign, e - 1 + 15, sig - 4)


def fp8_quantize(x: float) -> FP8Value:
    """Round one real to FP8 (round-to-nearest-even, saturating)."""
    return FP8Value.from_real(x)


def fp8_quantize_values(x) -> np.ndarray:
    """Array version of :func:`fp8_quantize`, returning exact grid values."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("fp8 quantization requires finite inputs")
    a = np.abs(x)
    _, e = np.frexp(a)
    step = np.maximum(e - 1, _FP8_MIN_NORMAL_EXP) - _FP8_MAN_BITS
    k = np.rint(np.ldexp(a, -step))
    v = np.minimum(np.ldexp(k, step), FP8_MAX)
    return np.where(a == 0.0, 0.0, np.copysign(v, x))


def fp8_encode_values(values) -> np.ndarray:
    """Map exact FP8 grid values to their storage bytes."""
    values = np.asarray(values, dtype=np.float64)
    a = np.abs(values)
    subnormal = a < math.ldexp(1, _FP8_MIN_NORMAL_EXP)
    _, e = np.frexp(a)
    ue = e - 1
    sig = np.where(subnormal, np.ldexp(a, 16), np.ldexp(a, _FP8_MAN_BITS - ue))
    man = np.rint(np.where(subnormal, sig, sig - 4)).astype(np.int64)
    expf = np.where(subnormal, 0, ue + 15).astype(np.int64)
    sign = np.signbit(values).astype(np.int64)
    # exactness check: reconstruct and compare
    mag = np.where(subnormal, np.ldexp(man, -16), np.ldexp(4 + man, expf - 17))
    ok = (np.where(sign == 1, -mag, mag) == values) & (expf >= 0) & (expf <= 30)
    ok |= a == 0.0
    if not np.all(ok):
        raise ValueError("input contains values not on the FP8 grid")
    byte = (sign << 7) | (expf << 2) | man
    return np.where(a == 0.0, 0, byte).astype(np.uint8)


@lru_cache(maxsize=1)
def _fp8_decode_table() -> np.ndarray:
    table = np.full(256, np.nan)
    for byte in range(256):
        expf = (byte >> 2) & 0x1F
        if expf == 31:
            continue
        table[byte] = FP8Value.from_byte(byte).value
    return table


def fp8_decode_bytes(data) -> np.ndarray:
    data = np.asarray(data, dtype=np.uint8)
    out = _fp8_decode_table()[data]
    if np.any(np.isnan(out)):
        raise ValueError("input contains bytes with the reserved exponent field 31")
    return out


def fp8_enumerate() -> list[float]:
    """All distinct finite FP8 values, ascending."""
    table = _fp8_decode_table()
    return sorted({float(v) for v in table if not math.isnan(v)})


@dataclass(frozen=True)
class FP16Value:
    """IEEE half precision, restricted to finite values (saturating)."""

    sign: int
    exponent: int   # 5-bit field, 0..30
    mantissa: int   # 10-bit field

    def __post_init__(self):
        if self.sign not in (0, 1):
            raise ValueError("sign must be 0 or 1")
        if not 0 <= self.exponent <= 30:
            raise ValueError(f"exponent field must be in [0, 30], got {self.exponent}")
        if not 0 <= self.mantissa <= 1023:
            raise ValueError(f"mantissa field must be in [0, 1023], got {self.mantissa}")

    @property
    def value(self) -> float:
        if self.exponent == 0:
            mag = math.ldexp(self.mantissa, -24)
        else:
            mag = math.ldexp(1024 + self.mantissa, self.exponent - 15 - 10)
        return -mag if self.sign else mag

    def to_bytes(self) -> bytes:
        bits = (self.sign << 15) | (self.exponent << 10) | self.mantissa
        return bits.to_bytes(2, "little")

    @classmethod
    def from_bytes(cls, data: bytes) -> "FP16Value":
        bits = int.from_bytes(data, "little")
        return cls((bits >> 15) & 1, (bits >> 10) & 0x1F, bits & 0x3FF)

    @classmethod
    def from_real(cls, x: float) -> "FP16Value":
        if not math.isfinite(x):
            raise ValueError(f"fp16 quantization requires a finite input, got {x!r}")
        v = _round_binary(x, _FP16_MAN_BITS, _FP16_MIN_NORMAL_EXP, FP16_MAX)
        return cls._from_exact(v)

    @classmethod
    def _from_exact(cls, v: float) -> "FP16Value":
        if v == 0.0:
            return cls(0, 0, 0)
        sign = 1 if v < 0 else 0
        a = abs(v)
        if a < math.ldexp(1, _FP16_MIN_NORMAL_EXP):
            return cls(sign, 0, int(math.ldexp(a, 24)))
        _, e = math.frexp(a)
        sig = int(math.ldexp(a, _FP16_MAN_BITS - (e - 1)))
        return cls(sign, e - 1 + 15, sig - 1024)

    def significand(self) -> tuple[int, int]:
        """Exact (integer, power) pair with value == integer * 2**power."""
        if self.exponent == 0:
            m, p = self.mantissa, -24
        else:
            m, p = 1024 + self.mantissa, self.exponent - 25
        return (-m if self.sign else m), p


def fp16_quantize(x: float) -> FP16Value:
    """Round one real to FP16 (round-to-nearest-even, saturating)."""
    return FP16Value.from_real(x)


def fp16_quantize_values(x) -> np.ndarray:
    """Array version of :func:`fp16_quantize`, returning exact grid values."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("fp16 quantization requires finite inputs")
    with np.errstate(over="ignore"):
        v = x.astype(np.float16).astype(np.float64)
    v = np.where(np.isinf(v), np.copysign(FP16_MAX, x), v)
    return np.where(x == 0.0, 0.0, v)
