"""Command-line harness.

Subcommands: ``train``, ``eval``, ``quantize`` (FP32 checkpoint ->
FloatSD8), ``export-lut``, ``mac-verify``, ``ablate``.  A ``--config``
file holds ``key=value`` lines using the same names as the flags.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys

import numpy as np

from . import mac_sim, numerics, trainer
from .checkpoint import requantize_checkpoint
from .numerics import DEFAULT_CONFIG, FP8Value, FP16Value, FloatSD8Weight
from .qactivations import build_sigmoid_lut, export_sigmoid_lut_csv
from .tasks import TASK_KINDS, TaskSpec

_TYPED_KEYS = {
    "task": str, "alphabet": int, "length": int,
    "n_train": int, "n_valid": int, "task_seed": int,
    "preset": str, "seed": int, "loss_scale": float, "out": str,
    "deterministic": lambda v: v.lower() in ("1", "true", "yes"),
    "embed": int, "hidden": int, "layers": int, "optimizer": str,
    "lr": float, "epochs": int, "batch": int, "forget_bias": float,
    "act_fmt": str, "first_layer_act": str, "last_layer_act": str,
    "accum_block": int,
}


def _read_config_file(path) -> dict:
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SystemExit(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in _TYPED_KEYS:
                raise SystemExit(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _TYPED_KEYS[key](raw.strip())
    return values


def _merge(args, file_values: dict, key: str, default):
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    if key in file_values:
        return file_values[key]
    return default


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--preset", choices=list(trainer.PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--loss-scale", type=float, dest="loss_scale")
    p.add_argument("--out", help="output directory")
    p.add_argument("--deterministic", action="store_true", default=None)


def _task_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=list(TASK_KINDS))
    p.add_argument("--alphabet", type=int, help="copy-task alphabet size")
    p.add_argument("--length", type=int)
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--n-valid", type=int, dest="n_valid")
    p.add_argument("--hidden", type=int)
    p.add_argument("--embed", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)


_TASK_DEFAULTS = {
    "copy": dict(vocab=8, length=5, n_train=512, n_valid=128,
                 hidden=64, embed=16, epochs=30, batch=16, lr=2e-3, optimizer="adam"),
    "adding": dict(vocab=0, length=16, n_train=512, n_valid=128,
                   hidden=32, embed=0, epochs=20, batch=16, lr=2e-3, optimizer="adam"),
    "char-lm": dict(vocab=0, length=40, n_train=1024, n_valid=192,
                    hidden=128, embed=32, epochs=4, batch=32, lr=2e-3, optimizer="adam"),
    "tiny-tagging": dict(vocab=0, length=0, n_train=240, n_valid=60,
                         hidden=48, embed=24, epochs=10, batch=16, lr=2e-3, optimizer="adam"),
}


def _build_run_config(args) -> trainer.RunConfig:
    fv = _read_config_file(args.config) if args.config else {}
    kind = _merge(args, fv, "task", "copy")
    d = _TASK_DEFAULTS[kind]
    task = TaskSpec(
        kind=kind,
        vocab=_merge(args, fv, "alphabet", d["vocab"]),
        length=_merge(args, fv, "length", d["length"]),
        n_train=_merge(args, fv, "n_train", d["n_train"]),
        n_valid=_merge(args, fv, "n_valid", d["n_valid"]),
        seed=fv.get("task_seed", 0),
    )
    return trainer.RunConfig(
        task=task,
        preset=_merge(args, fv, "preset", "floatsd8"),
        embed_dim=_merge(args, fv, "embed", d["embed"]),
        hidden_size=_merge(args, fv, "hidden", d["hidden"]),
        num_layers=_merge(args, fv, "layers", 1),
        optimizer=_merge(args, fv, "optimizer", d["optimizer"]),
        lr=_merge(args, fv, "lr", d["lr"]),
        epochs=_merge(args, fv, "epochs", d["epochs"]),
        batch_size=_merge(args, fv, "batch", d["batch"]),
        loss_scale=_merge(args, fv, "loss_scale", 1024.0),
        act_fmt=fv.get("act_fmt"),
        first_layer_act=fv.get("first_layer_act"),
        last_layer_act=fv.get("last_layer_act"),
        accum_block=fv.get("accum_block", 1),
        seed=_merge(args, fv, "seed", 0),
        out_dir=_merge(args, fv, "out", None),
        deterministic=bool(_merge(args, fv, "deterministic", False)),
        forget_bias=fv.get("forget_bias", 1.0),
    )


def _cmd_train(args) -> int:
    cfg = _build_run_config(args)
    records, ckpt = trainer.train(cfg)
    for rec in records[-2:]:
        print(f"epoch {rec.epoch} {rec.split}: loss={rec.loss:.6f} "
              f"{rec.metric_name}={rec.metric_value:.6f}")
    if ckpt:
        print(f"checkpoint: {ckpt}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _build_run_config(args)
    rec = trainer.evaluate(args.checkpoint, cfg.task,
                           batch_size=cfg.batch_size,
                           first_layer_act=cfg.first_layer_act,
                           last_layer_act=cfg.last_layer_act,
                           accum_block=cfg.accum_block)
    print(f"valid: loss={rec.loss:.6f} {rec.metric_name}={rec.metric_value:.6f}")
    return 0


def _cmd_quantize(args) -> int:
    n = requantize_checkpoint(args.input, args.output)
    print(f"requantized {n} weight tensors -> {args.output}")
    return 0


def _cmd_export_lut(args) -> int:
    lut = build_sigmoid_lut(DEFAULT_CONFIG)
    if args.out:
        with open(args.out, "w", newline="") as f:
            export_sigmoid_lut_csv(lut, f)
        print(f"wrote {lut.entry_count} entries to {args.out}")
    else:
        export_sigmoid_lut_csv(lut, sys.stdout)
    return 0


def _mac_oracle(bundle: mac_sim.MacBundle) -> float:
    # independent route: exact float64 sum, then IEEE half rounding
    s = bundle.carry_in.value
    for w, x in zip(bundle.weights, bundle.inputs):
        wv = sum(t * math.ldexp(1.0, sh) for t, sh in numerics.fsd8_partial_products(w))
        s += wv * x.value
    with np.errstate(over="ignore"):
        f = float(np.float16(s))
    if math.isinf(f):
        return math.copysign(numerics.FP16_MAX, s)
    return f


def _cmd_mac_verify(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    zero_w = FloatSD8Weight(0, 0, 0)
    zero_x = FP8Value(0, 0, 0)
    failures = 0
    checked = 0

    # exhaustive: every weight code against every FP8 sample, fixed carry
    fp8_samples = [FP8Value.from_byte(b) for b in range(256)
                   if (b >> 2) & 0x1F != 31][::4]
    carry = FP16Value.from_real(0.375)
    for e in range(8):
        for code in range(-15, 16):
            w = FloatSD8Weight.from_code(e, code)
            for x in fp8_samples:
                bundle = mac_sim.MacBundle((x, zero_x, zero_x, zero_x),
                                           (w, zero_w, zero_w, zero_w), carry)
                checked += 1
                if mac_sim.mac_compute(bundle).value != _mac_oracle(bundle):
                    failures += 1
    print(f"exhaustive sweep: {checked} bundles, {failures} mismatches")

    rand_fail = 0
    weight_bytes = [b for b in range(256) if b & 0x1F != 0x10]
    input_bytes = [b for b in range(256) if (b >> 2) & 0x1F != 31]
    grid16 = [0.0, 0.5, -1.5, 240.0, -1024.0, 2.0 ** -14, 65504.0]
    for _ in range(args.random):
        ws = tuple(FloatSD8Weight.from_byte(int(rng.choice(weight_bytes))) for _ in range(4))
        xs = tuple(FP8Value.from_byte(int(rng.choice(input_bytes))) for _ in range(4))
        carry = FP16Value.from_real(float(rng.choice(grid16)))
        bundle = mac_sim.MacBundle(xs, ws, carry)
        checked += 1
        if mac_sim.mac_compute(bundle).value != _mac_oracle(bundle):
            rand_fail += 1
    failures += rand_fail
    print(f"random bundles: {args.random} bundles, {rand_fail} mismatches")

    if args.trace:
        pipe = mac_sim.MacPipeline()
        bundle = mac_sim.MacBundle(
            tuple(FP8Value.from_real(v) for v in (1.0, 0.5, -0.25, 2.0)),
            tuple(numerics.fsd8_quantize(v) for v in (1.0, -0.5, 0.25, 1.5)),
            FP16Value.from_real(0.125))
        with open(args.trace, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["cycle", "occupancy", "issued", "retired"])
            for cyc in range(12):
                pipe.step(bundle if cyc < 6 else None)
                occ = "".join("1" if s else "0" for s in pipe.occupancy())
                writer.writerow([pipe.cycle, occ, pipe.issued, pipe.retired])
        print(f"trace written to {args.trace}")

    print(f"total: {checked} bundles, {failures} mismatches "
          f"[{'PASS' if failures == 0 else 'FAIL'}]")
    return 0 if failures == 0 else 1


def _cmd_ablate(args) -> int:
    cfg = _build_run_config(args)
    if args.rows:
        rows = []
        for chunk in args.rows.split(";"):
            parts = tuple(p.strip() for p in chunk.split(","))
            if len(parts) != 3:
                raise SystemExit(f"--rows entries need first,last,other: {chunk!r}")
            rows.append(parts)
    else:
        rows = [("fp8", "fp8", "fp8"), ("fp16", "fp16", "fp16"),
                ("fp8", "fp16", "fp8"), ("fp16", "fp8", "fp8"),
                ("fp16", "fp16", "fp8")]
    out_path = args.rows_out
    results = trainer.precision_ablation(cfg, rows, out_path)
    for row in results:
        print(f"first={row['first']} last={row['last']} other={row['other']}: "
              f"loss={row['loss']:.6f} {row['metric_name']}={row['metric_value']:.6f}")
    if out_path:
        print(f"comparison written to {out_path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="floatsd8",
        description="Reduced-precision LSTM training with FloatSD8 weights")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a desk-scale task")
    _common_flags(p)
    _task_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a task")
    p.add_argument("--checkpoint", required=True)
    _common_flags(p)
    _task_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("quantize", help="refresh FloatSD8 codes from FP32 masters")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_quantize)

    p = sub.add_parser("export-lut", help="dump the sigmoid LUT as CSV")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_export_lut)

    p = sub.add_parser("mac-verify", help="run the MAC equivalence suites")
    p.add_argument("--random", type=int, default=100_000)
    p.add_argument("--seed", type=int)
    p.add_argument("--trace", help="write a cycle/occupancy trace CSV")
    p.set_defaults(func=_cmd_mac_verify)

    p = sub.add_parser("ablate", help="activation-precision comparison rows")
    _common_flags(p)
    _task_flags(p)
    p.add_argument("--rows", help="semicolon-separated first,last,other rows")
    p.add_argument("--rows-out", help="comparison CSV path")
    p.set_defaults(func=_cmd_ablate)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
