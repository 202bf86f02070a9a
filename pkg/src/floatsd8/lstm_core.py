"""Quantized LSTM cell: forward, backward-through-time pieces, and updates.

Conventions used throughout:

* Arrays are float64 ndarrays whose elements lie exactly on the grid of the
  format they claim to be (FloatSD8 / FP8 / FP16); quantizer functions from
  :mod:`floatsd8.numerics` enforce this.
* Per-gate weights are stored fused: rows are the four gates in order
  (f, i, o, g), columns are the concatenated (input, recurrent) axis, so a
  layer's weight matrix has shape (4H, I+H).
* A :class:`PrecisionPolicy` decides which quantizer runs at each insertion
  point.  The all-"shadow" policy turns every quantizer into the identity
  and reproduces a plain high-precision LSTM.

Accumulation order contract: dot products accumulate sequentially over the
summation index in blocks of ``accum_block`` addends; the running sum is
rounded to FP16 after each block (block size 1 = rounding after every
addition; block size 4 reproduces the 4-pair MAC of the hardware model).
Within one block the partial sum is exact before the single rounding.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .numerics import (
    DEFAULT_CONFIG,
    FormatConfig,
    fp8_encode_values,
    fp8_quantize_values,
    fp16_quantize_values,
    fsd8_enumerate,
    fsd8_quantize_values,
)
from .qactivations import build_sigmoid_lut, tanh_fp8_table

__all__ = [
    "GATES",
    "PrecisionPolicy",
    "LSTMLayerParams",
    "LSTMState",
    "StepCache",
    "CellGrads",
    "qmatvec",
    "cell_forward",
    "cell_backward",
    "SGD",
    "Adam",
    "optimizer_step",
    "weight_init",
    "audit_formats",
    "operand_formats",
]

GATES = ("f", "i", "o", "g")


# ---------------------------------------------------------------------------
# Precision policy
# ---------------------------------------------------------------------------

def _q_identity(a):
    return np.asarray(a, dtype=np.float64)


_ACT_QUANTIZERS = {
    "fp8": fp8_quantize_values,
    "fp16": fp16_quantize_values,
    "shadow": _q_identity,
}


@dataclass(frozen=True)
class PrecisionPolicy:
    """Where each number format is inserted along the training path.

    ``first_layer_act`` applies to the embedding outputs (the network's
    first activations), ``last_layer_act`` to the output FC activations;
    ``None`` falls back to ``act_fmt``.  Backward activations at those spots
    follow the same override.  ``loss_scale`` multiplies the loss before
    backward and is divided back out before the optimizer sees gradients.
    """

    weight_fmt: str = "floatsd8"      # "floatsd8" | "shadow"
    grad_fmt: str = "fp8"             # "fp8" | "shadow"
    act_fmt: str = "fp8"              # "fp8" | "fp16" | "shadow"
    first_layer_act: str | None = None
    last_layer_act: str | None = None
    master_fmt: str = "fp32"          # "fp16" | "fp32"
    loss_scale: float = 1024.0
    accum_fmt: str = "fp16"           # "fp16" | "shadow"
    accum_block: int = 1

    def __post_init__(self):
        if self.weight_fmt not in ("floatsd8", "shadow"):
            raise ValueError(f"unknown weight_fmt {self.weight_fmt!r}")
        if self.grad_fmt not in ("fp8", "shadow"):
            raise ValueError(f"unknown grad_fmt {self.grad_fmt!r}")
        for fmt in (self.act_fmt, self.first_layer_act, self.last_layer_act):
            if fmt is not None and fmt not in _ACT_QUANTIZERS:
                raise ValueError(f"unknown activation format {fmt!r}")
        if self.master_fmt not in ("fp16", "fp32"):
            raise ValueError(f"unknown master_fmt {self.master_fmt!r}")
        if self.accum_fmt not in ("fp16", "shadow"):
            raise ValueError(f"unknown accum_fmt {self.accum_fmt!r}")
        if self.loss_scale <= 0:
            raise ValueError("loss_scale must be positive")
        if self.accum_block < 1:
            raise ValueError("accum_block must be >= 1")

    @classmethod
    def shadow(cls, loss_scale: float = 1024.0) -> "PrecisionPolicy":
        """Every quantizer is the identity: the exact FP32-style baseline."""
        return cls(
            weight_fmt="shadow", grad_fmt="shadow", act_fmt="shadow",
            master_fmt="fp32", loss_scale=loss_scale, accum_fmt="shadow",
        )

    @property
    def quantized_gates(self) -> bool:
        return self.weight_fmt == "floatsd8"

    def act_layer_fmt(self, layer: str) -> str:
        if layer == "first" and self.first_layer_act is not None:
            return self.first_layer_act
        if layer == "last" and self.last_layer_act is not None:
            return self.last_layer_act
        return self.act_fmt

    def quantize_act(self, a, layer: str = "other") -> np.ndarray:
        return _ACT_QUANTIZERS[self.act_layer_fmt(layer)](a)

    def quantize_grad(self, a, layer: str = "other") -> np.ndarray:
        if self.grad_fmt == "shadow":
            return _q_identity(a)
        if layer in ("first", "last"):
            fmt = self.act_layer_fmt(layer)
            return _ACT_QUANTIZERS["fp16" if fmt == "fp16" else "fp8"](a)
        return fp8_quantize_values(a)

    def quantize_weight(self, a, config: FormatConfig = DEFAULT_CONFIG) -> np.ndarray:
        if self.weight_fmt == "shadow":
            return _q_identity(a)
        return fsd8_quantize_values(a, config)

    def quantize_bias(self, a) -> np.ndarray:
        # biases enter the MAC through the carry-in port, so they live in
        # the accumulation format
        if self.accum_fmt == "shadow":
            return _q_identity(a)
        return fp16_quantize_values(a)

    def accum_round(self, a) -> np.ndarray:
        if self.accum_fmt == "shadow":
            return _q_identity(a)
        return fp16_quantize_values(a)

    def round_master(self, a) -> np.ndarray:
        if self.master_fmt == "fp16":
            return fp16_quantize_values(a)
        return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# Operand-format audit hooks
# ---------------------------------------------------------------------------

_audit_log: list | None = None


def operand_formats(a, config: FormatConfig = DEFAULT_CONFIG) -> frozenset[str]:
    """Which format grids an array lies on exactly (may be several)."""
    a = np.asarray(a, dtype=np.float64)
    fmts = set()
    grid = np.array(fsd8_enumerate(config))
    idx = np.clip(np.searchsorted(grid, a), 0, len(grid) - 1)
    on_grid = grid[idx] == a
    if np.all(on_grid):
        fmts.add("floatsd8")
    comp = 1.0 - a
    comp_idx = np.clip(np.searchsorted(grid, comp), 0, len(grid) - 1)
    if np.all(on_grid | (grid[comp_idx] == comp)):
        fmts.add("qsigmoid")
    if np.array_equal(fp8_quantize_values(a), a):
        fmts.add("fp8")
    if np.array_equal(fp16_quantize_values(a), a):
        fmts.add("fp16")
    return frozenset(fmts)


def _audit(site: str, lhs, rhs, config: FormatConfig) -> None:
    if _audit_log is None:
        return
    _audit_log.append((site, operand_formats(lhs, config), operand_formats(rhs, config)))


@contextmanager
def audit_formats():
    """Record (site, lhs formats, rhs formats) for every multiply site."""
    global _audit_log
    prev, _audit_log = _audit_log, []
    try:
        yield _audit_log
    finally:
        _audit_log = prev


# ---------------------------------------------------------------------------
# Quantized matrix-vector products
# ---------------------------------------------------------------------------

def _accumulate(W: np.ndarray, X: np.ndarray, bias: np.ndarray,
                policy: PrecisionPolicy) -> np.ndarray:
    # X: (B, C), W: (R, C), bias: (R,) -> (B, R)
    if policy.accum_fmt == "shadow":
        return X @ W.T + bias
    acc = np.tile(bias, (X.shape[0], 1))
    blk = policy.accum_block
    cols = W.shape[1]
    for k0 in range(0, cols, blk):
        k1 = min(k0 + blk, cols)
        acc = fp16_quantize_values(acc + X[:, k0:k1] @ W[:, k0:k1].T)
    return acc


def qmatvec(W, x, bias, policy: PrecisionPolicy | None = None,
            config: FormatConfig = DEFAULT_CONFIG) -> np.ndarray:
    """FP16-accumulated product of a FloatSD8 matrix with an FP8 vector.

    Accepts a single vector (C,) or a batch (B, C); returns the matching
    (R,) or (B, R) array of FP16 values (bias included as the initial
    carry).
    """
    policy = policy or PrecisionPolicy()
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if W.ndim != 2 or X.ndim != 2 or X.shape[1] != W.shape[1]:
        raise ValueError(f"shape mismatch: W {W.shape}, x {x.shape}")
    if bias.shape != (W.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match {W.shape[0]} rows")
    _audit("matvec", W, X, config)
    out = _accumulate(W, X, bias, policy)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Layer parameters and state
# ---------------------------------------------------------------------------

def weight_init(shape, scheme: str = "uniform", seed=0, fan: int | None = None) -> np.ndarray:
    """Master-precision initialization, deterministic under ``seed``.

    Default scheme draws U(-1/sqrt(fan), 1/sqrt(fan)) with ``fan`` the last
    axis length unless given.
    """
    if scheme != "uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(fan if fan is not None else shape[-1])
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LSTMLayerParams:
    """One layer's fused gate weights plus their master copies.

    ``w_master``/``b_master`` hold the full-precision values the optimizer
    updates; ``w_q``/``b_q`` are the quantized working copies and satisfy
    ``w_q == quantize(w_master)`` at all times outside an update step.
    """

    input_size: int
    hidden_size: int
    w_master: np.ndarray          # (4H, I+H)
    b_master: np.ndarray          # (4H,)
    w_q: np.ndarray = field(default=None, repr=False)
    b_q: np.ndarray = field(default=None, repr=False)

    @classmethod
    def create(cls, input_size: int, hidden_size: int, policy: PrecisionPolicy,
               seed=0, forget_bias: float = 0.0,
               config: FormatConfig = DEFAULT_CONFIG) -> "LSTMLayerParams":
        w = weight_init((4 * hidden_size, input_size + hidden_size),
                        seed=seed, fan=hidden_size)
        b = np.zeros(4 * hidden_size)
        b[:hidden_size] = forget_bias
        # masters live on the master-precision grid from the start
        layer = cls(input_size, hidden_size, policy.round_master(w),
                    policy.round_master(b))
        layer.refresh_quantized(policy, config)
        return layer

    def refresh_quantized(self, policy: PrecisionPolicy,
                          config: FormatConfig = DEFAULT_CONFIG) -> None:
        self.w_q = policy.quantize_weight(self.w_master, config)
        self.b_q = policy.quantize_bias(self.b_master)

    def named_parameters(self):
        yield "w", "weight", self.w_master
        yield "b", "bias", self.b_master

    def gate_rows(self, gate: str) -> slice:
        k = GATES.index(gate)
        return slice(k * self.hidden_size, (k + 1) * self.hidden_size)

    def wx(self, gate: str) -> np.ndarray:
        return self.w_q[self.gate_rows(gate), : self.input_size]

    def wh(self, gate: str) -> np.ndarray:
        return self.w_q[self.gate_rows(gate), self.input_size:]

    def bias(self, gate: str) -> np.ndarray:
        return self.b_q[self.gate_rows(gate)]


@dataclass
class StepCache:
    """Everything one forward step must remember for BPTT."""

    inputs: np.ndarray      # (B, I+H) concatenated [x_t, h_{t-1}]
    z: np.ndarray           # (B, 4H) FP16 gate pre-activations
    f: np.ndarray
    i: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c_prev: np.ndarray
    c_new: np.ndarray
    tanh_c: np.ndarray


@dataclass
class LSTMState:
    """Cell state, output, and the per-step caches of the current window."""

    c: np.ndarray
    h: np.ndarray
    caches: tuple[StepCache, ...] = ()

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "LSTMState":
        return cls(np.zeros((batch, hidden)), np.zeros((batch, hidden)))


@lru_cache(maxsize=4)
def _gate_tables(config: FormatConfig):
    return build_sigmoid_lut(config), tanh_fp8_table()


def _fp8_keys(a: np.ndarray) -> np.ndarray:
    return fp8_encode_values(fp8_quantize_values(a))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    neg = z <= 0
    t = np.exp(z[neg])
    out[neg] = t / (1.0 + t)
    out[~neg] = 1.0 / (1.0 + np.exp(-z[~neg]))
    return out


def cell_forward(params: LSTMLayerParams, x_t, state: LSTMState,
                 policy: PrecisionPolicy,
                 config: FormatConfig = DEFAULT_CONFIG) -> LSTMState:
    """One LSTM step with the policy's quantizers at every insertion point.

    Gate pre-activations accumulate in FP16; f/i/o pass through the
    quantized sigmoid (FloatSD8-valued), g through the FP8 tanh; the new
    cell state and output are rounded to FP16 once (the MAC contract) and
    then quantized to the activation storage format.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    H = params.hidden_size
    if x_t.ndim != 2 or x_t.shape[1] != params.input_size:
        raise ValueError(f"x_t shape {x_t.shape} does not match input size {params.input_size}")
    if state.h.shape != (x_t.shape[0], H):
        raise ValueError(f"state shape {state.h.shape} does not match ({x_t.shape[0]}, {H})")
    inputs = np.concatenate([x_t, state.h], axis=1)
    _audit("matvec", params.w_q, inputs, config)
    z = _accumulate(params.w_q, inputs, params.b_q, policy)
    zf, zi, zo, zg = (z[:, k * H:(k + 1) * H] for k in range(4))
    if policy.quantized_gates:
        lut, tanh_table = _gate_tables(config)
        f = lut.value_table[_fp8_keys(zf)]
        i = lut.value_table[_fp8_keys(zi)]
        o = lut.value_table[_fp8_keys(zo)]
        g = tanh_table[_fp8_keys(zg)]
    else:
        f, i, o = _sigmoid(zf), _sigmoid(zi), _sigmoid(zo)
        g = np.tanh(zg)
    _audit("cell.f_c", f, state.c, config)
    _audit("cell.i_g", i, g, config)
    c16 = policy.accum_round(f * state.c + i * g)
    c_new = policy.quantize_act(c16)
    if policy.quantized_gates:
        tanh_c = tanh_table[_fp8_keys(c_new)]
    else:
        tanh_c = np.tanh(c_new)
    _audit("cell.o_tanh", o, tanh_c, config)
    h16 = policy.accum_round(o * tanh_c)
    h_new = policy.quantize_act(h16)
    cache = StepCache(inputs, z, f, i, o, g, state.c, c_new, tanh_c)
    return LSTMState(c_new, h_new, state.caches + (cache,))


@dataclass
class CellGrads:
    """Gradients flowing out of one BPTT step."""

    dx: np.ndarray
    dh_prev: np.ndarray
    dc_prev: np.ndarray
    dw: np.ndarray          # (4H, I+H), exact batch-merged contribution
    db: np.ndarray


def cell_backward(params: LSTMLayerParams, cache: StepCache | None, grad_h, grad_c,
                  policy: PrecisionPolicy,
                  config: FormatConfig = DEFAULT_CONFIG) -> CellGrads:
    """Standard LSTM step backward with FP8-quantized stored gradients.

    The quantizers are treated as straight-through: gate derivatives use the
    analytic sigmoid/tanh derivative at the cached FP16 pre-activation.
    Internal sums run in FP16 (via the policy accumulator); every gradient
    that would be stored or propagated is quantized to the gradient format.
    """
    if cache is None:
        raise RuntimeError("cell_backward requires the cache from a matching forward call")
    grad_h = np.asarray(grad_h, dtype=np.float64)
    grad_c = np.asarray(grad_c, dtype=np.float64)
    H = params.hidden_size
    I = params.input_size
    z = cache.z
    zf, zi, zo, zg = (z[:, k * H:(k + 1) * H] for k in range(4))
    sf, si, so = _sigmoid(zf), _sigmoid(zi), _sigmoid(zo)
    qg = policy.quantize_grad

    do_pre = qg(grad_h * cache.tanh_c * so * (1.0 - so))
    dc_tot = qg(grad_c + grad_h * cache.o * (1.0 - np.tanh(cache.c_new) ** 2))
    df_pre = qg(dc_tot * cache.c_prev * sf * (1.0 - sf))
    di_pre = qg(dc_tot * cache.g * si * (1.0 - si))
    dg_pre = qg(dc_tot * cache.i * (1.0 - np.tanh(zg) ** 2))
    dc_prev = qg(dc_tot * cache.f)

    dgates = np.concatenate([df_pre, di_pre, do_pre, dg_pre], axis=1)
    _audit("matvec_t", params.w_q, dgates, config)
    dinp = _accumulate(params.w_q.T, dgates, np.zeros(I + H), policy)
    dx = qg(dinp[:, :I])
    dh_prev = qg(dinp[:, I:])
    _audit("wgrad", dgates, cache.inputs, config)
    dw = np.einsum("bj,bc->jc", dgates, cache.inputs)
    db = dgates.sum(axis=0)
    return CellGrads(dx, dh_prev, dc_prev, dw, db)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class SGD:
    """Plain gradient descent on the master copies."""

    def __init__(self, lr: float):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr

    def begin_step(self):
        pass

    def update(self, name: str, grad: np.ndarray) -> np.ndarray:
        return self.lr * grad


class Adam:
    """ADAM with moments kept in FP32 regardless of master precision."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def begin_step(self):
        self.t += 1

    def update(self, name: str, grad: np.ndarray) -> np.ndarray:
        g = np.asarray(grad, dtype=np.float32)
        if name not in self.m:
            self.m[name] = np.zeros_like(g)
            self.v[name] = np.zeros_like(g)
        m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
        v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
        mhat = m / (1 - self.beta1 ** self.t)
        vhat = v / (1 - self.beta2 ** self.t)
        step = self.lr * mhat / (np.sqrt(vhat) + np.float32(self.eps))
        return step.astype(np.float64)


def optimizer_step(params, gradients: dict, optimizer, policy: PrecisionPolicy,
                   config: FormatConfig = DEFAULT_CONFIG) -> None:
    """Apply one update to every master copy, then re-quantize the weights.

    ``params`` is anything exposing ``named_parameters()`` yielding
    (name, kind, master array) and ``refresh_quantized(policy, config)``.
    Masters update in the policy's master precision; missing gradient
    entries are skipped.
    """
    optimizer.begin_step()
    for name, _kind, master in params.named_parameters():
        grad = gradients.get(name)
        if grad is None:
            continue
        step = optimizer.update(name, grad)
        master[...] = policy.round_master(master - step)
    params.refresh_quantized(policy, config)
