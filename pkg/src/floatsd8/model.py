"""Sequence model: embedding -> LSTM stack -> output FC, with BPTT.

The first-layer activation override applies to the embedding outputs (the
embedding itself is a lookup, not a multiply); the last-layer override
applies to the output FC activations.  Loss is cross-entropy over masked
positions (or mean squared error for scalar regression), multiplied by the
policy's loss scale before backward; returned gradients are divided by the
scale again, so the optimizer sees unscaled values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lstm_core import (
    DEFAULT_CONFIG,
    FormatConfig,
    LSTMLayerParams,
    LSTMState,
    PrecisionPolicy,
    _accumulate,
    _audit,
    cell_backward,
    cell_forward,
    weight_init,
)

__all__ = ["ModelSpec", "QLSTMModel", "Batch", "sequence_forward", "sequence_backward"]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description, independent of precision."""

    input_mode: str              # "tokens" | "vector"
    embed_dim: int
    hidden_size: int
    num_layers: int
    output_dim: int
    vocab_size: int = 0          # tokens mode
    input_dim: int = 0           # vector mode
    loss: str = "ce"             # "ce" | "mse"
    quantize_embeddings: bool = True
    forget_bias: float = 1.0


@dataclass
class Batch:
    """One minibatch: integer tokens or real vectors, plus targets.

    ``targets`` are class ids (ce) of shape (B, T) or scalars (mse) of
    shape (B,).  ``mask`` selects the loss-bearing positions for ce.
    """

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray | None = None


@dataclass
class _ForwardCaches:
    x_seq: np.ndarray
    layer_states: list[LSTMState]
    h_top: np.ndarray            # (B, T, H)
    logits: np.ndarray           # (B, T, O)
    probs: np.ndarray | None
    batch: Batch
    n_loss_terms: int


class QLSTMModel:
    """The full stack with master and quantized parameter copies."""

    def __init__(self, spec: ModelSpec, policy: PrecisionPolicy,
                 config: FormatConfig = DEFAULT_CONFIG, seed: int = 0):
        if spec.input_mode not in ("tokens", "vector"):
            raise ValueError(f"unknown input mode {spec.input_mode!r}")
        self.spec = spec
        self.policy = policy
        self.config = config
        ss = np.random.SeedSequence(seed)
        n_tensors = 2 + spec.num_layers
        children = ss.spawn(n_tensors)
        self.masters: dict[str, np.ndarray] = {}
        self.kinds: dict[str, str] = {}
        if spec.input_mode == "tokens":
            self.masters["embed.w"] = policy.round_master(weight_init(
                (spec.vocab_size, spec.embed_dim), seed=children[0]))
            self.kinds["embed.w"] = "weight" if spec.quantize_embeddings else "shadow-weight"
        self.layers: list[LSTMLayerParams] = []
        in_size = spec.embed_dim if spec.input_mode == "tokens" else spec.input_dim
        for l in range(spec.num_layers):
            layer = LSTMLayerParams.create(
                in_size, spec.hidden_size, policy, seed=children[1 + l],
                forget_bias=spec.forget_bias, config=config)
            self.layers.append(layer)
            self.masters[f"layer{l}.w"] = layer.w_master
            self.kinds[f"layer{l}.w"] = "weight"
            self.masters[f"layer{l}.b"] = layer.b_master
            self.kinds[f"layer{l}.b"] = "bias"
            in_size = spec.hidden_size
        self.masters["fc.w"] = policy.round_master(weight_init(
            (spec.output_dim, spec.hidden_size), seed=children[-1], fan=spec.hidden_size))
        self.kinds["fc.w"] = "weight"
        self.masters["fc.b"] = np.zeros(spec.output_dim)
        self.kinds["fc.b"] = "bias"
        self.quantized: dict[str, np.ndarray] = {}
        self.refresh_quantized(policy, config)

    # -- parameter management -------------------------------------------------

    def named_parameters(self):
        for name, master in self.masters.items():
            yield name, self.kinds[name], master

    def refresh_quantized(self, policy: PrecisionPolicy | None = None,
                          config: FormatConfig | None = None) -> None:
        policy = policy or self.policy
        config = config or self.config
        for name, master in self.masters.items():
            kind = self.kinds[name]
            if kind == "weight":
                self.quantized[name] = policy.quantize_weight(master, config)
            elif kind == "bias":
                self.quantized[name] = policy.quantize_bias(master)
            else:
                self.quantized[name] = np.asarray(master, dtype=np.float64).copy()
        for l, layer in enumerate(self.layers):
            layer.w_q = self.quantized[f"layer{l}.w"]
            layer.b_q = self.quantized[f"layer{l}.b"]

    def load_quantized(self, tensors: dict[str, np.ndarray],
                       masters: dict[str, np.ndarray] | None = None) -> None:
        """Install externally stored quantized weights (and optionally masters)."""
        for name in self.masters:
            if masters is not None and name in masters:
                self.masters[name][...] = masters[name]
            if name in tensors:
                self.quantized[name] = np.asarray(tensors[name], dtype=np.float64)
        for l, layer in enumerate(self.layers):
            layer.w_q = self.quantized[f"layer{l}.w"]
            layer.b_q = self.quantized[f"layer{l}.b"]

    # -- forward / loss --------------------------------------------------------

    def _input_activations(self, inputs: np.ndarray) -> np.ndarray:
        if self.spec.input_mode == "tokens":
            x_seq = self.quantized["embed.w"][inputs]          # (B, T, E)
        else:
            x_seq = np.asarray(inputs, dtype=np.float64)
        return self.policy.quantize_act(x_seq, "first")

    def forward(self, inputs: np.ndarray) -> _ForwardCaches:
        x_seq = self._input_activations(inputs)
        B, T = x_seq.shape[0], x_seq.shape[1]
        H = self.spec.hidden_size
        states = [LSTMState.zeros(B, H) for _ in self.layers]
        h_top = np.empty((B, T, H))
        for t in range(T):
            x = x_seq[:, t]
            for l, layer in enumerate(self.layers):
                states[l] = cell_forward(layer, x, states[l], self.policy, self.config)
                x = states[l].h
            h_top[:, t] = x
        fc_w, fc_b = self.quantized["fc.w"], self.quantized["fc.b"]
        logits = np.empty((B, T, self.spec.output_dim))
        for t in range(T):
            _audit("matvec", fc_w, h_top[:, t], self.config)
            logits[:, t] = _accumulate(fc_w, h_top[:, t], fc_b, self.policy)
        logits = self.policy.quantize_act(logits, "last")
        return _ForwardCaches(x_seq, states, h_top, logits, None, None, 0)

    def compute_loss(self, caches: _ForwardCaches, batch: Batch) -> tuple[float, dict]:
        """Unscaled loss plus task metrics; stores what backward needs."""
        caches.batch = batch
        if self.spec.loss == "ce":
            logits = caches.logits
            mask = batch.mask if batch.mask is not None else np.ones(batch.targets.shape, dtype=bool)
            shifted = logits - logits.max(axis=-1, keepdims=True)
            expz = np.exp(shifted)
            probs = expz / expz.sum(axis=-1, keepdims=True)
            caches.probs = probs
            n = int(mask.sum())
            caches.n_loss_terms = n
            b_idx, t_idx = np.nonzero(mask)
            picked = probs[b_idx, t_idx, batch.targets[b_idx, t_idx]]
            loss = float(-np.log(np.maximum(picked, 1e-300)).sum() / n)
            correct = int((logits[b_idx, t_idx].argmax(axis=-1) == batch.targets[b_idx, t_idx]).sum())
            return loss, {"n": n, "correct": correct}
        # mse on the final-step scalar output
        pred = caches.logits[:, -1, 0]
        err = pred - batch.targets
        caches.n_loss_terms = len(err)
        loss = float(np.mean(err ** 2))
        return loss, {"n": len(err), "abs_err": float(np.abs(err).sum())}

    # -- backward --------------------------------------------------------------

    def _dlogits(self, caches: _ForwardCaches) -> np.ndarray:
        batch = caches.batch
        scale = self.policy.loss_scale
        if self.spec.loss == "ce":
            mask = batch.mask if batch.mask is not None else np.ones(batch.targets.shape, dtype=bool)
            d = caches.probs.copy()
            b_idx, t_idx = np.nonzero(mask)
            d[b_idx, t_idx, batch.targets[b_idx, t_idx]] -= 1.0
            d *= mask[..., None] / caches.n_loss_terms * scale
            return d
        d = np.zeros_like(caches.logits)
        pred = caches.logits[:, -1, 0]
        d[:, -1, 0] = 2.0 * (pred - batch.targets) / caches.n_loss_terms * scale
        return d

    def backward(self, caches: _ForwardCaches) -> dict[str, np.ndarray]:
        policy = self.policy
        spec = self.spec
        B, T = caches.h_top.shape[0], caches.h_top.shape[1]
        H = spec.hidden_size
        fc_w = self.quantized["fc.w"]
        dlogits = policy.quantize_grad(self._dlogits(caches), "last")

        grads = {name: np.zeros_like(m) for name, m in self.masters.items()}
        dh_fc = np.empty((B, T, H))
        for t in range(T):
            _audit("matvec_t", fc_w, dlogits[:, t], self.config)
            dh_fc[:, t] = _accumulate(fc_w.T, dlogits[:, t], np.zeros(H), policy)
            grads["fc.w"] = policy.accum_round(
                grads["fc.w"] + np.einsum("bo,bh->oh", dlogits[:, t], caches.h_top[:, t]))
            grads["fc.b"] = policy.accum_round(grads["fc.b"] + dlogits[:, t].sum(axis=0))

        n_layers = len(self.layers)
        dh_carry = [np.zeros((B, H)) for _ in range(n_layers)]
        dc_carry = [np.zeros((B, H)) for _ in range(n_layers)]
        dx_seq = np.zeros_like(caches.x_seq) if spec.input_mode == "tokens" else None
        for t in reversed(range(T)):
            dh_above = policy.quantize_grad(dh_fc[:, t])
            for l in reversed(range(n_layers)):
                layer = self.layers[l]
                dh_total = policy.quantize_grad(policy.accum_round(dh_above + dh_carry[l]))
                g = cell_backward(layer, caches.layer_states[l].caches[t],
                                  dh_total, dc_carry[l], policy, self.config)
                grads[f"layer{l}.w"] = policy.accum_round(grads[f"layer{l}.w"] + g.dw)
                grads[f"layer{l}.b"] = policy.accum_round(grads[f"layer{l}.b"] + g.db)
                dh_carry[l] = g.dh_prev
                dc_carry[l] = g.dc_prev
                dh_above = g.dx
            if dx_seq is not None:
                dx_seq[:, t] = policy.quantize_grad(dh_above, "first")
        if spec.input_mode == "tokens" and "embed.w" in grads:
            np.add.at(grads["embed.w"], caches.batch.inputs.reshape(-1),
                      dx_seq.reshape(-1, spec.embed_dim))
            grads["embed.w"] = policy.accum_round(grads["embed.w"])

        scale = policy.loss_scale
        out = {}
        for name, g in grads.items():
            out[name] = policy.quantize_grad(g) / scale
        return out


def sequence_forward(model: QLSTMModel, batch: Batch) -> tuple[float, dict, _ForwardCaches]:
    """Run the stack over a token/vector sequence; returns loss, metrics, caches."""
    inputs = np.asarray(batch.inputs)
    if inputs.ndim < 2 or inputs.shape[1] == 0:
        raise ValueError("sequence_forward requires a nonempty (batch, time, ...) input")
    caches = model.forward(inputs)
    loss, stats = model.compute_loss(caches, batch)
    return loss, stats, caches


def sequence_backward(model: QLSTMModel, caches: _ForwardCaches) -> dict[str, np.ndarray]:
    """BPTT over the cached window; gradients come back unscaled."""
    return model.backward(caches)
