"""Bit-accurate behavioral model of the FloatSD8 MAC, PE, and LSTM unit.

The MAC takes four (FP8 input, FloatSD8 weight) pairs plus an FP16 carry-in
per bundle.  Stage 1 decodes the weights into at most two partial products
each and finds the alignment exponent; stages 2-3 align and add; stages 4-5
round and normalize to FP16.  The default datapath is exact: every partial
product is a signed integer multiple of 2**-25 (the FP8 subnormal floor of
2**-16 times the minimum weight partial-product weight of 2**-9 at the
default bias), so summing integer-scaled terms before a single FP16
rounding loses nothing.  A configurable narrow window truncates aligned
addends toward zero below the top bit minus the window width, for hardware
exploration only.

The processing element is output-stationary: each output's running sum sits
in a partial-sum register while 4-pair chunks of the reduction axis stream
through the MAC with the register as carry-in.  A dependent chain must wait
out the 5-cycle pipeline, so the PE round-robins the chunk streams of B
batch columns; steady-state utilization is min(B, 5)/5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    DEFAULT_CONFIG,
    FP8Value,
    FP16Value,
    FloatSD8Weight,
    FormatConfig,
    fp8_encode_values,
    fp8_quantize_values,
    fsd8_encode_values,
    fsd8_partial_products,
    fsd8_quantize,
)
from .lstm_core import GATES, LSTMLayerParams, LSTMState, StepCache, _gate_tables

__all__ = [
    "MacBundle",
    "MacPipeline",
    "PEConfig",
    "PEStats",
    "UnitStats",
    "CapacityError",
    "PIPELINE_DEPTH",
    "mac_compute",
    "mac_pipeline_step",
    "pe_run",
    "lstm_unit_run",
]

PIPELINE_DEPTH = 5


class CapacityError(RuntimeError):
    """Raised when a workload exceeds the partial-sum register file."""


@dataclass(frozen=True)
class MacBundle:
    """The MAC's unit of work: four pairs plus the carry-in."""

    inputs: tuple[FP8Value, FP8Value, FP8Value, FP8Value]
    weights: tuple[FloatSD8Weight, FloatSD8Weight, FloatSD8Weight, FloatSD8Weight]
    carry_in: FP16Value

    def __post_init__(self):
        if len(self.inputs) != 4 or len(self.weights) != 4:
            raise ValueError("a MacBundle carries exactly four input/weight pairs")


def _fp8_significand(x: FP8Value) -> tuple[int, int]:
    # exact (integer, power) pair: value == integer * 2**power
    if x.exponent == 0:
        m, p = x.mantissa, -16
    else:
        m, p = 4 + x.mantissa, x.exponent - 17
    return (-m if x.sign else m), p


def _round_scaled_to_fp16(total: int, scale_exp: int) -> FP16Value:
    # Stage 4/5: round an integer * 2**scale_exp to FP16, ties to even,
    # saturating at the maximum finite value.
    if total == 0:
        return FP16Value(0, 0, 0)
    sign = 1 if total < 0 else 0
    mag = -total if total < 0 else total
    top = mag.bit_length() - 1 + scale_exp        # floor(log2 |value|)
    lsb = max(top - 10, -24)                      # target quantum exponent
    shift = lsb - scale_exp
    if shift <= 0:
        k = mag << -shift
    else:
        q, r = divmod(mag, 1 << shift)
        half = 1 << (shift - 1)
        if r > half or (r == half and (q & 1)):
            q += 1
        k = q
    if k == 0:
        return FP16Value(0, 0, 0)
    if k.bit_length() > 11:                       # 2048: carry into next binade
        k >>= 1
        lsb += 1
    if k < 1024 and lsb == -24:
        return FP16Value(sign, 0, k)
    kbits = k.bit_length() - 1
    value_exp = kbits + lsb
    if value_exp > 15:
        return FP16Value(sign, 30, 1023)
    k <<= 10 - kbits
    return FP16Value(sign, value_exp + 15, k - 1024)


def mac_compute(bundle: MacBundle, config: FormatConfig = DEFAULT_CONFIG,
                window_bits: int | None = None) -> FP16Value:
    """One MAC operation: FP16 rounding of the exact product-sum plus carry.

    With ``window_bits`` set, aligned addends are truncated toward zero
    below ``max_exponent - window_bits + 1`` before summation (inexact
    narrow-datapath mode).
    """
    addends: list[tuple[int, int]] = []           # (integer, exponent of LSB)
    n_partials = 0
    for w, x in zip(bundle.weights, bundle.inputs):
        terms = fsd8_partial_products(w, config)
        n_partials += len(terms)
        if not terms:
            continue
        xm, xp = _fp8_significand(x)
        if xm == 0:
            continue
        for s, shift in terms:
            addends.append((s * xm, shift + xp))
    assert n_partials <= 8, "decode stage produced more than two partials per weight"
    cm, cp = bundle.carry_in.significand()
    if cm != 0:
        addends.append((cm, cp))
    if not addends:
        return FP16Value(0, 0, 0)
    if window_bits is not None:
        top = max(abs(m).bit_length() - 1 + p for m, p in addends)
        cutoff = top - window_bits + 1
        trimmed = []
        for m, p in addends:
            if p < cutoff:
                drop = cutoff - p
                m = -((-m) >> drop) if m < 0 else m >> drop   # toward zero
                p = cutoff
            trimmed.append((m, p))
        addends = trimmed
    base = min(p for _, p in addends)
    total = sum(m << (p - base) for m, p in addends)
    return _round_scaled_to_fp16(total, base)


@dataclass
class MacPipeline:
    """Five-stage pipeline; a result retires five cycles after its issue.

    Behavioral model: the arithmetic happens at issue and the value rides
    the stage registers, which is bit-equivalent to staging the datapath.
    Stage occupancy and issue/retire counts are observable every cycle.
    """

    config: FormatConfig = DEFAULT_CONFIG
    window_bits: int | None = None
    stages: list = field(default_factory=lambda: [None] * PIPELINE_DEPTH)
    cycle: int = 0
    issued: int = 0
    retired: int = 0

    def occupancy(self) -> tuple[bool, ...]:
        return tuple(slot is not None for slot in self.stages)

    @property
    def in_flight(self) -> int:
        return sum(1 for slot in self.stages if slot is not None)

    def step(self, issue: MacBundle | None = None) -> FP16Value | None:
        out = self.stages[-1]
        self.stages = [None] + self.stages[:-1]
        if issue is not None:
            self.stages[0] = mac_compute(issue, self.config, self.window_bits)
            self.issued += 1
        self.cycle += 1
        if out is not None:
            self.retired += 1
        return out


def mac_pipeline_step(pipeline: MacPipeline, issue: MacBundle | None = None
                      ) -> tuple[MacPipeline, FP16Value | None]:
    """Advance one cycle; returns the pipeline and a result if one retired."""
    return pipeline, pipeline.step(issue)


# ---------------------------------------------------------------------------
# Output-stationary processing element
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PEConfig:
    batch_size: int
    psum_registers: int = 8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class PEStats:
    issued: int
    cycles: int                  # through the last retirement
    steady_period: int           # measured cycles per round-robin round
    utilization: float           # min(B, depth)/depth


def pe_run(config: PEConfig, W, X, bias, fmt: FormatConfig = DEFAULT_CONFIG
           ) -> tuple[np.ndarray, PEStats]:
    """Output-stationary product: W (R,K) against a batch X (B,K), plus bias.

    Inputs must already be exact FloatSD8 / FP8 grid values.  Outputs are
    bit-identical to chaining :func:`mac_compute` per output element over
    4-pair chunks in ascending column order (equivalently ``qmatvec`` with
    ``accum_block=4``).  Cycle accounting models the round-robin interleave
    of the B batch columns over the 5-stage MAC; a partial-sum register is
    reused only after its previous chain retires.
    """
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    R, K = W.shape
    B = X.shape[0]
    if X.shape[1] != K or bias.shape != (R,):
        raise ValueError(f"shape mismatch: W {W.shape}, X {X.shape}, bias {bias.shape}")
    if B > config.psum_registers:
        raise CapacityError(
            f"batch of {B} exceeds the {config.psum_registers}-entry partial-sum register file")
    w_bytes = fsd8_encode_values(W, fmt)
    weights = [[FloatSD8Weight.from_byte(int(b)) for b in row] for row in w_bytes]
    x_bytes = fp8_encode_values(X)
    inputs = [[FP8Value.from_byte(int(b)) for b in row] for row in x_bytes]
    zero_w = FloatSD8Weight(0, 0, 0)
    zero_x = FP8Value(0, 0, 0)
    n_chunks = (K + 3) // 4

    outputs = np.empty((B, R))
    psum: list[FP16Value] = [FP16Value(0, 0, 0)] * B
    cycle = 0
    issued = 0
    ready = [0] * B
    round_starts: list[int] = []
    for r in range(R):
        for b in range(B):
            psum[b] = FP16Value.from_real(float(bias[r]))
        for chunk in range(n_chunks):
            lo = chunk * 4
            first_issue = None
            for b in range(B):
                if cycle < ready[b]:
                    cycle = ready[b]
                if first_issue is None:
                    first_issue = cycle
                ws = weights[r][lo:lo + 4]
                xs = inputs[b][lo:lo + 4]
                bundle = MacBundle(
                    tuple(xs + [zero_x] * (4 - len(xs))),
                    tuple(ws + [zero_w] * (4 - len(ws))),
                    psum[b],
                )
                psum[b] = mac_compute(bundle, fmt)
                issued += 1
                ready[b] = cycle + PIPELINE_DEPTH
                cycle += 1
            round_starts.append(first_issue)
        for b in range(B):
            outputs[b, r] = psum[b].value
    period = max(B, PIPELINE_DEPTH)
    gaps = {round_starts[i + 1] - round_starts[i] for i in range(len(round_starts) - 1)}
    assert gaps <= {period}, f"steady-state period mismatch: {gaps} vs {period}"
    stats = PEStats(
        issued=issued,
        cycles=max(ready),
        steady_period=period,
        utilization=min(B, PIPELINE_DEPTH) / PIPELINE_DEPTH,
    )
    return outputs, stats


# ---------------------------------------------------------------------------
# LSTM neuron circuit
# ---------------------------------------------------------------------------

@dataclass
class UnitStats:
    pe_cycles: int
    mac1_issues: int
    mac2_issues: int


def _gate_pair(entry) -> tuple[FloatSD8Weight, FloatSD8Weight]:
    # A quantized sigmoid output occupies two MAC operand slots: (term, 0)
    # for nonpositive inputs, (1, -term) for positive ones.
    if entry.has_one:
        neg = FloatSD8Weight(entry.term.exponent, -entry.term.msg, -entry.term.sg)
        return fsd8_quantize(1.0), neg
    return entry.term, FloatSD8Weight(0, 0, 0)


def lstm_unit_run(params: LSTMLayerParams, x_t, state: LSTMState,
                  config: FormatConfig = DEFAULT_CONFIG,
                  pe_config: PEConfig | None = None
                  ) -> tuple[LSTMState, UnitStats]:
    """One timestep on the neuron circuit: four PEs, the LUTs, two MACs.

    MAC #1 forms the new cell state from the four operands (f pair times
    the previous cell state, i pair times the cell gate); MAC #2 forms the
    output from the o pair times tanh of the new cell state.  Bit-identical
    to :func:`floatsd8.lstm_core.cell_forward` under the matching ordering
    policy (``accum_block=4`` with FP8 activations).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    B = x_t.shape[0]
    H = params.hidden_size
    if x_t.ndim != 2 or x_t.shape[1] != params.input_size:
        raise ValueError(f"x_t shape {x_t.shape} does not match input size {params.input_size}")
    if state.h.shape != (B, H):
        raise ValueError(f"state shape {state.h.shape} does not match ({B}, {H})")
    pe_config = pe_config or PEConfig(batch_size=B, psum_registers=max(8, B))
    inputs = np.concatenate([x_t, state.h], axis=1)

    lut, tanh_table = _gate_tables(config)

    z = np.empty((B, 4 * H))
    pe_cycles = 0
    for k, gate in enumerate(GATES):
        rows = params.gate_rows(gate)
        out, stats = pe_run(pe_config, params.w_q[rows], inputs, params.b_q[rows], config)
        z[:, k * H:(k + 1) * H] = out
        pe_cycles = max(pe_cycles, stats.cycles)

    keys = fp8_encode_values(fp8_quantize_values(z))
    zero_x = FP8Value(0, 0, 0)
    zero_w = FloatSD8Weight(0, 0, 0)
    zero_carry = FP16Value(0, 0, 0)
    c_new = np.empty((B, H))
    h_new = np.empty((B, H))
    mac1 = mac2 = 0
    for b in range(B):
        for j in range(H):
            f_entry = lut.entries[int(keys[b, j])]
            i_entry = lut.entries[int(keys[b, H + j])]
            o_entry = lut.entries[int(keys[b, 2 * H + j])]
            g_in = FP8Value.from_real(float(tanh_table[int(keys[b, 3 * H + j])]))
            f1, f2 = _gate_pair(f_entry)
            i1, i2 = _gate_pair(i_entry)
            c_prev = FP8Value.from_real(float(state.c[b, j]))
            c16 = mac_compute(
                MacBundle((c_prev, c_prev, g_in, g_in), (f1, f2, i1, i2), zero_carry),
                config)
            mac1 += 1
            c_fp8 = FP8Value.from_real(c16.value)
            c_new[b, j] = c_fp8.value
            tanh_c = FP8Value.from_real(float(tanh_table[c_fp8.to_byte()]))
            o1, o2 = _gate_pair(o_entry)
            h16 = mac_compute(
                MacBundle((tanh_c, tanh_c, zero_x, zero_x), (o1, o2, zero_w, zero_w), zero_carry),
                config)
            mac2 += 1
            h_new[b, j] = FP8Value.from_real(h16.value).value
    tanh_c_arr = tanh_table[fp8_encode_values(c_new)]
    cache = StepCache(
        inputs=inputs, z=z,
        f=lut.value_table[keys[:, 0:H]], i=lut.value_table[keys[:, H:2 * H]],
        o=lut.value_table[keys[:, 2 * H:3 * H]], g=tanh_table[keys[:, 3 * H:4 * H]],
        c_prev=state.c, c_new=c_new, tanh_c=tanh_c_arr,
    )
    stats = UnitStats(pe_cycles=pe_cycles, mac1_issues=mac1, mac2_issues=mac2)
    return LSTMState(c_new, h_new, state.caches + (cache,)), stats
