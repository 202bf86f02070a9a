"""Two-region quantized sigmoid and the FP8 tanh, plus their lookup tables.

Quantizing the sigmoid directly to the signed-digit weight grid leaves the
quantization error badly unbalanced between positive and negative inputs
(the grid is log-spaced, dense near zero and coarse near one).  Splitting
the range fixes it:

    y = Q(sigmoid(x))          for x <= 0
    y = 1 - Q(sigmoid(-x))     for x >  0

where Q is the FloatSD8 quantizer with clamp-to-min underflow, so the
output never collapses to exactly 0 or 1.  For positive inputs the output
therefore needs the pair (1, -term): one constant plus one FloatSD8 value,
which the MAC consumes as two operand slots.

Both the sigmoid and tanh tables are keyed by the FP8-quantized
pre-activation.  Construction happens once; lookups are pure and
thread-safe.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .numerics import (
    DEFAULT_CONFIG,
    UNDERFLOW_CLAMP,
    FloatSD8Weight,
    FormatConfig,
    FP8Value,
    fp8_quantize,
    fp8_quantize_values,
    fp8_encode_values,
    fsd8_enumerate,
    fsd8_min_positive,
    fsd8_quantize,
    fsd8_quantize_values,
)

__all__ = [
    "QSigmoidOutput",
    "SigmoidLUT",
    "qsigmoid",
    "qsigmoid_values",
    "build_sigmoid_lut",
    "qtanh",
    "qtanh_values",
    "tanh_fp8_table",
    "export_sigmoid_lut_csv",
]


def _sigmoid_neg(x: float) -> float:
    # sigmoid for x <= 0, overflow-free
    t = math.exp(x)
    return t / (1.0 + t)


@dataclass(frozen=True)
class QSigmoidOutput:
    """One quantized sigmoid result.

    ``value`` is ``term`` decoded when ``has_one`` is false (input <= 0) and
    ``1 - term`` decoded when true (input > 0, where ``term`` stores
    Q(sigmoid(-x))).  Always strictly inside (0, 1).
    """

    has_one: bool
    term: FloatSD8Weight
    value: float


def qsigmoid(x: float, config: FormatConfig = DEFAULT_CONFIG) -> QSigmoidOutput:
    """Quantize sigmoid(x) using the two-region scheme."""
    if not math.isfinite(x):
        raise ValueError(f"qsigmoid requires a finite input, got {x!r}")
    qcfg = replace(config, underflow_policy=UNDERFLOW_CLAMP)
    if x <= 0:
        term = fsd8_quantize(_sigmoid_neg(x), qcfg)
        return QSigmoidOutput(False, term, term.decode(config))
    term = fsd8_quantize(_sigmoid_neg(-x), qcfg)
    return QSigmoidOutput(True, term, 1.0 - term.decode(config))


def qsigmoid_values(x, config: FormatConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Array version of :func:`qsigmoid`, returning the decoded outputs.

    Computes Q(sigmoid(-|x|)) once per element and mirrors it for positive
    inputs, so it agrees with the scalar path bit for bit and the
    complement identity holds exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("qsigmoid requires finite inputs")
    qcfg = replace(config, underflow_policy=UNDERFLOW_CLAMP)
    t = np.exp(-np.abs(x))
    term = fsd8_quantize_values(t / (1.0 + t), qcfg)
    return np.where(x > 0, 1.0 - term, term)


@dataclass(frozen=True)
class SigmoidLUT:
    """Memoized quantized sigmoid keyed by FP8-quantized input.

    ``entries`` maps every valid FP8 storage byte to its QSigmoidOutput.
    ``negative_image`` is the full value set of the quantized sigmoid over
    real x <= 0 (42 values at the default bias): the representable grid
    points between the clamp floor and sigmoid(0) = 1/2.

    The vectorized tables index by FP8 byte; bytes with the reserved
    exponent field hold NaN.
    """

    config: FormatConfig
    entries: dict[int, QSigmoidOutput]
    negative_image: tuple[float, ...]
    value_table: np.ndarray     # byte -> decoded output
    term_table: np.ndarray      # byte -> decoded term
    has_one_table: np.ndarray   # byte -> bool

    @property
    def entry_count(self) -> int:
        return len(self.entries)

    def lookup(self, x: float) -> QSigmoidOutput:
        return self.entries[fp8_quantize(x).to_byte()]

    def values_for(self, preacts: np.ndarray) -> np.ndarray:
        """Decoded gate outputs for an array of pre-activations."""
        keys = fp8_encode_values(fp8_quantize_values(preacts))
        return self.value_table[keys]


def build_sigmoid_lut(config: FormatConfig = DEFAULT_CONFIG) -> SigmoidLUT:
    """Construct the sigmoid table over the whole FP8 key space."""
    entries: dict[int, QSigmoidOutput] = {}
    value_table = np.full(256, np.nan)
    term_table = np.full(256, np.nan)
    has_one_table = np.zeros(256, dtype=bool)
    for byte in range(256):
        if (byte >> 2) & 0x1F == 31:
            continue
        key_value = FP8Value.from_byte(byte).value
        out = qsigmoid(key_value, config)
        entries[byte] = out
        value_table[byte] = out.value
        term_table[byte] = out.term.decode(config)
        has_one_table[byte] = out.has_one
    minpos = fsd8_min_positive(config)
    image = tuple(v for v in fsd8_enumerate(config) if minpos <= v <= 0.5)
    return SigmoidLUT(config, entries, image, value_table, term_table, has_one_table)


def qtanh(x: float) -> FP8Value:
    """tanh rounded to FP8; odd symmetry is exact."""
    if not math.isfinite(x):
        raise ValueError(f"qtanh requires a finite input, got {x!r}")
    return fp8_quantize(math.tanh(x))


def qtanh_values(x) -> np.ndarray:
    """Array version of :func:`qtanh`, returning exact FP8 grid values."""
    return fp8_quantize_values(np.tanh(np.asarray(x, dtype=np.float64)))


@lru_cache(maxsize=1)
def tanh_fp8_table() -> np.ndarray:
    """FP8-keyed tanh table: byte of the input -> FP8 output value."""
    table = np.full(256, np.nan)
    for byte in range(256):
        if (byte >> 2) & 0x1F == 31:
            continue
        table[byte] = qtanh(FP8Value.from_byte(byte).value).value
    return table


def export_sigmoid_lut_csv(lut: SigmoidLUT, stream) -> None:
    """Dump the table bit-exactly for hardware verification."""
    writer = csv.writer(stream)
    writer.writerow(["input_code", "input_value", "has_one", "fsd8_code", "decoded_output"])
    for byte in sorted(lut.entries):
        out = lut.entries[byte]
        writer.writerow([
            byte,
            repr(FP8Value.from_byte(byte).value),
            int(out.has_one),
            out.term.to_byte(),
            repr(out.value),
        ])
