"""Training harness: presets, the epoch loop, metrics CSV, checkpoints.

Preset names pin the precision insertion points:

* ``fp32``              -- shadow path end to end (the exact baseline).
* ``floatsd8``          -- FloatSD8 weights, FP8 gradients/activations,
                           FP32 masters, FloatSD8 sigmoid outputs.
* ``floatsd8-fp16master`` -- identical except the master copies are FP16.

Data order is a pure function of (task, seed), so runs under different
presets see identical batches.  In deterministic mode the timing column is
written as 0.0 so two identical seeded runs produce byte-identical CSVs.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import load_model_tensors, save_model
from .lstm_core import Adam, SGD, PrecisionPolicy, optimizer_step
from .model import Batch, ModelSpec, QLSTMModel, sequence_backward, sequence_forward
from .numerics import DEFAULT_CONFIG, FormatConfig
from .tasks import Dataset, TaskSpec, generate_task

__all__ = [
    "PRESETS",
    "RunConfig",
    "MetricRecord",
    "build_policy",
    "train",
    "evaluate",
    "precision_ablation",
    "check_metrics_csv",
    "METRICS_HEADER",
]

METRICS_HEADER = ["epoch", "split", "loss", "metric_name", "metric_value", "seconds"]

PRESETS = ("fp32", "floatsd8", "floatsd8-fp16master")


@dataclass(frozen=True)
class RunConfig:
    task: TaskSpec
    preset: str = "floatsd8"
    embed_dim: int = 16
    hidden_size: int = 64
    num_layers: int = 1
    optimizer: str = "adam"       # "adam" | "sgd"
    lr: float = 2e-3
    epochs: int = 10
    batch_size: int = 16
    loss_scale: float = 1024.0
    act_fmt: str | None = None              # "other layers" activations
    first_layer_act: str | None = None
    last_layer_act: str | None = None
    accum_block: int = 1
    seed: int = 0
    out_dir: str | None = None
    deterministic: bool = True
    forget_bias: float = 1.0


@dataclass
class MetricRecord:
    epoch: int
    split: str
    loss: float
    metric_name: str
    metric_value: float
    seconds: float

    def __post_init__(self):
        if self.metric_name == "perplexity" and self.metric_value < 1.0 - 1e-12:
            raise ValueError(f"perplexity below 1: {self.metric_value}")
        if self.metric_name == "accuracy" and not 0.0 <= self.metric_value <= 1.0:
            raise ValueError(f"accuracy outside [0, 1]: {self.metric_value}")

    def row(self) -> list[str]:
        return [str(self.epoch), self.split, repr(self.loss), self.metric_name,
                repr(self.metric_value), f"{self.seconds:.3f}"]


def build_policy(config: RunConfig) -> PrecisionPolicy:
    if config.preset == "fp32":
        return PrecisionPolicy.shadow(loss_scale=config.loss_scale)
    if config.preset not in PRESETS:
        raise ValueError(f"unknown preset {config.preset!r}; expected one of {PRESETS}")
    master = "fp16" if config.preset == "floatsd8-fp16master" else "fp32"
    return PrecisionPolicy(
        master_fmt=master,
        act_fmt=config.act_fmt or "fp8",
        loss_scale=config.loss_scale,
        first_layer_act=config.first_layer_act,
        last_layer_act=config.last_layer_act,
        accum_block=config.accum_block,
    )


def _model_spec(dataset: Dataset, config: RunConfig) -> ModelSpec:
    return ModelSpec(
        input_mode=dataset.input_mode,
        embed_dim=config.embed_dim,
        hidden_size=config.hidden_size,
        num_layers=config.num_layers,
        output_dim=dataset.output_dim,
        vocab_size=dataset.vocab_size,
        input_dim=dataset.input_dim,
        loss=dataset.loss,
        forget_bias=config.forget_bias,
    )


def _metric_value(dataset: Dataset, mean_loss: float, totals: dict) -> float:
    if dataset.metric == "accuracy":
        return totals["correct"] / totals["n"]
    if dataset.metric == "perplexity":
        return math.exp(mean_loss)
    return totals["abs_err"] / totals["n"]          # mae


def _run_split(model: QLSTMModel, dataset: Dataset, inputs, targets, mask,
               batch_size: int) -> tuple[float, float]:
    """Inference pass over one split; returns (mean loss, metric value)."""
    totals = {"n": 0, "correct": 0, "abs_err": 0.0}
    loss_sum = 0.0
    for lo in range(0, len(inputs), batch_size):
        sl = slice(lo, lo + batch_size)
        batch = Batch(inputs[sl], targets[sl], None if mask is None else mask[sl])
        loss, stats, _ = sequence_forward(model, batch)
        loss_sum += loss * stats["n"]
        totals["n"] += stats["n"]
        totals["correct"] += stats.get("correct", 0)
        totals["abs_err"] += stats.get("abs_err", 0.0)
    mean_loss = loss_sum / totals["n"]
    return mean_loss, _metric_value(dataset, mean_loss, totals)


def _check_finite(loss: float, config: RunConfig, epoch: int) -> None:
    if math.isnan(loss) or math.isinf(loss):
        raise RuntimeError(
            f"training diverged: loss={loss} at epoch {epoch} "
            f"(preset={config.preset}, lr={config.lr}, seed={config.seed})")


def train(config: RunConfig) -> tuple[list[MetricRecord], str | None]:
    """Run the full training loop; returns metric records and checkpoint path.

    Writes ``metrics.csv`` (append-only, one row per epoch and split) and
    ``checkpoint.bin`` into ``config.out_dir`` when set.
    """
    dataset = generate_task(config.task)
    policy = build_policy(config)
    model = QLSTMModel(_model_spec(dataset, config), policy, seed=config.seed)
    if config.lr == 0.0:
        opt = None                      # evaluation-style loop, no updates
    elif config.optimizer == "adam":
        opt = Adam(config.lr)
    elif config.optimizer == "sgd":
        opt = SGD(config.lr)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")

    csv_file = None
    writer = None
    ckpt_path = None
    if config.out_dir is not None:
        try:
            os.makedirs(config.out_dir, exist_ok=True)
            csv_file = open(os.path.join(config.out_dir, "metrics.csv"), "a", newline="")
        except OSError as exc:
            raise RuntimeError(f"cannot open metrics log in {config.out_dir!r}: {exc}") from exc
        writer = csv.writer(csv_file)
        if csv_file.tell() == 0:
            writer.writerow(METRICS_HEADER)

    data_rng = np.random.default_rng([config.seed, 0xD47A])
    records: list[MetricRecord] = []
    n_train = len(dataset.inputs_train)
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = data_rng.permutation(n_train)
            totals = {"n": 0, "correct": 0, "abs_err": 0.0}
            loss_sum = 0.0
            for lo in range(0, n_train, config.batch_size):
                idx = order[lo:lo + config.batch_size]
                batch = Batch(
                    dataset.inputs_train[idx],
                    dataset.targets_train[idx],
                    None if dataset.mask_train is None else dataset.mask_train[idx],
                )
                loss, stats, caches = sequence_forward(model, batch)
                _check_finite(loss, config, epoch)
                if opt is not None:
                    grads = sequence_backward(model, caches)
                    optimizer_step(model, grads, opt, policy)
                loss_sum += loss * stats["n"]
                totals["n"] += stats["n"]
                totals["correct"] += stats.get("correct", 0)
                totals["abs_err"] += stats.get("abs_err", 0.0)
            train_loss = loss_sum / totals["n"]
            seconds = 0.0 if config.deterministic else time.perf_counter() - t0
            records.append(MetricRecord(epoch, "train", train_loss, dataset.metric,
                                        _metric_value(dataset, train_loss, totals), seconds))
            t1 = time.perf_counter()
            val_loss, val_metric = _run_split(
                model, dataset, dataset.inputs_valid, dataset.targets_valid,
                dataset.mask_valid, config.batch_size)
            _check_finite(val_loss, config, epoch)
            seconds = 0.0 if config.deterministic else time.perf_counter() - t1
            records.append(MetricRecord(epoch, "valid", val_loss, dataset.metric,
                                        val_metric, seconds))
            if writer is not None:
                writer.writerow(records[-2].row())
                writer.writerow(records[-1].row())
                csv_file.flush()
        if config.out_dir is not None:
            ckpt_path = os.path.join(config.out_dir, "checkpoint.bin")
            save_model(ckpt_path, model)
    finally:
        if csv_file is not None:
            csv_file.close()
    return records, ckpt_path


def _spec_from_tensors(quantized: dict, dataset: Dataset, forget_bias: float = 1.0) -> ModelSpec:
    layer_ids = sorted(int(k[5:-2]) for k in quantized if k.startswith("layer") and k.endswith(".w"))
    if not layer_ids:
        raise ValueError("checkpoint holds no LSTM layers")
    w0 = quantized["layer0.w"]
    hidden = w0.shape[0] // 4
    in0 = w0.shape[1] - hidden
    fc = quantized["fc.w"]
    if "embed.w" in quantized:
        vocab, embed = quantized["embed.w"].shape
        if vocab != dataset.vocab_size:
            raise ValueError(
                f"checkpoint vocabulary {vocab} does not match task vocabulary {dataset.vocab_size}")
        if embed != in0:
            raise ValueError("embedding width does not match the first layer input size")
        mode, input_dim = "tokens", 0
    else:
        if in0 != dataset.input_dim:
            raise ValueError(
                f"checkpoint input size {in0} does not match task channels {dataset.input_dim}")
        mode, vocab, embed, input_dim = "vector", 0, in0, dataset.input_dim
    if fc.shape[0] != dataset.output_dim:
        raise ValueError(
            f"checkpoint output size {fc.shape[0]} does not match task outputs {dataset.output_dim}")
    return ModelSpec(
        input_mode=mode, embed_dim=embed, hidden_size=hidden,
        num_layers=len(layer_ids), output_dim=fc.shape[0], vocab_size=vocab,
        input_dim=input_dim, loss=dataset.loss, forget_bias=forget_bias)


def evaluate(checkpoint_path, task: TaskSpec, batch_size: int = 64,
             first_layer_act: str | None = None, last_layer_act: str | None = None,
             accum_block: int = 1,
             config: FormatConfig = DEFAULT_CONFIG) -> MetricRecord:
    """Inference-only pass over the task's validation split.

    Always runs the quantized path on the checkpoint's FloatSD8 weights
    (not the masters).  To reproduce a training run's logged validation
    metrics bit-exactly, pass the same batch size and activation overrides
    the run used (loss aggregation order follows the batch partition).
    """
    dataset = generate_task(task)
    quantized, masters = load_model_tensors(checkpoint_path, config)
    spec = _spec_from_tensors(quantized, dataset)
    policy = PrecisionPolicy(first_layer_act=first_layer_act,
                             last_layer_act=last_layer_act,
                             accum_block=accum_block)
    model = QLSTMModel(spec, policy, config=config, seed=0)
    model.load_quantized(quantized, masters)
    loss, metric = _run_split(model, dataset, dataset.inputs_valid,
                              dataset.targets_valid, dataset.mask_valid, batch_size)
    return MetricRecord(0, "valid", loss, dataset.metric, metric, 0.0)


def precision_ablation(config: RunConfig, overrides: list[tuple[str, str, str]],
                       out_path: str | None = None) -> list[dict]:
    """Rerun the same seed/model across (first, last, other) activation rows.

    Formats are restricted to fp8/fp16 (the shadow preset makes every row
    identical by construction).  Returns one dict per row; optionally
    writes a comparison CSV.
    """
    rows = []
    for first, last, other in overrides:
        for fmt in (first, last, other):
            if config.preset != "fp32" and fmt not in ("fp8", "fp16"):
                raise ValueError(f"ablation formats must be fp8/fp16, got {fmt!r}")
        run_cfg = replace(config, first_layer_act=first, last_layer_act=last,
                          act_fmt=other, out_dir=None)
        records, _ = train(run_cfg)
        final = [r for r in records if r.split == "valid"][-1]
        rows.append({
            "first": first, "last": last, "other": other,
            "loss": final.loss, "metric_name": final.metric_name,
            "metric_value": final.metric_value,
        })
    if out_path is not None:
        with open(out_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["first", "last", "other", "loss", "metric_name", "metric_value"])
            for row in rows:
                writer.writerow([row["first"], row["last"], row["other"],
                                 repr(row["loss"]), row["metric_name"],
                                 repr(row["metric_value"])])
    return rows


def check_metrics_csv(path) -> list[MetricRecord]:
    """Validate the schema and invariants of a metrics log; returns records."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        records = []
        last_epoch = 0
        for row in reader:
            if len(row) != len(METRICS_HEADER):
                raise ValueError(f"{path}: malformed row {row}")
            rec = MetricRecord(int(row[0]), row[1], float(row[2]), row[3],
                               float(row[4]), float(row[5]))
            if rec.split not in ("train", "valid"):
                raise ValueError(f"{path}: unknown split {rec.split!r}")
            if rec.epoch < last_epoch:
                raise ValueError(f"{path}: epochs not nondecreasing at {rec.epoch}")
            last_epoch = rec.epoch
            records.append(rec)
    return records
