"""Training-harness tests: presets, loop behavior, CSV, evaluation."""

import dataclasses
import math

import numpy as np
import pytest

from floatsd8 import trainer
from floatsd8.tasks import TaskSpec
from floatsd8.trainer import MetricRecord, RunConfig, build_policy, check_metrics_csv

TINY_COPY = TaskSpec("copy", vocab=4, length=3, n_train=32, n_valid=16, seed=1)


def tiny_config(**kw):
    base = dict(task=TINY_COPY, preset="floatsd8", embed_dim=8, hidden_size=8,
                epochs=2, batch_size=8, lr=2e-3, seed=5, deterministic=True)
    base.update(kw)
    return RunConfig(**base)


class TestPresets:
    def test_preset_names(self):
        assert set(trainer.PRESETS) == {"fp32", "floatsd8", "floatsd8-fp16master"}

    def test_fp32_is_shadow_end_to_end(self):
        pol = build_policy(tiny_config(preset="fp32"))
        assert pol.weight_fmt == "shadow"
        assert pol.grad_fmt == "shadow"
        assert pol.act_fmt == "shadow"
        assert pol.accum_fmt == "shadow"

    def test_fp16master_differs_only_in_master_fmt(self):
        a = build_policy(tiny_config(preset="floatsd8"))
        b = build_policy(tiny_config(preset="floatsd8-fp16master"))
        diff = {f.name for f in dataclasses.fields(a)
                if getattr(a, f.name) != getattr(b, f.name)}
        assert diff == {"master_fmt"}
        assert b.master_fmt == "fp16"

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            build_policy(tiny_config(preset="bf16"))


class TestMetricRecord:
    def test_invariants(self):
        MetricRecord(1, "valid", 0.5, "accuracy", 0.75, 0.0)
        MetricRecord(1, "valid", 0.5, "perplexity", 1.0, 0.0)
        with pytest.raises(ValueError):
            MetricRecord(1, "valid", 0.5, "perplexity", 0.5, 0.0)
        with pytest.raises(ValueError):
            MetricRecord(1, "valid", 0.5, "accuracy", 1.5, 0.0)


class TestTrainLoop:
    def test_writes_metrics_and_checkpoint(self, tmp_path):
        cfg = tiny_config(out_dir=str(tmp_path))
        records, ckpt = trainer.train(cfg)
        assert ckpt is not None
        assert (tmp_path / "metrics.csv").exists()
        parsed = check_metrics_csv(tmp_path / "metrics.csv")
        assert len(parsed) == len(records) == 2 * cfg.epochs
        assert [r.split for r in parsed[:2]] == ["train", "valid"]

    def test_zero_learning_rate_freezes_metrics(self):
        records, _ = trainer.train(tiny_config(lr=0.0, epochs=3))
        valid = [r for r in records if r.split == "valid"]
        assert len({r.loss for r in valid}) == 1
        assert len({r.metric_value for r in valid}) == 1

    def test_metrics_csv_is_append_only(self, tmp_path):
        cfg = tiny_config(out_dir=str(tmp_path), epochs=1)
        trainer.train(cfg)
        first = (tmp_path / "metrics.csv").read_bytes()
        trainer.train(cfg)
        combined = (tmp_path / "metrics.csv").read_bytes()
        assert combined.startswith(first)            # old rows untouched
        parsed = check_metrics_csv(tmp_path / "metrics.csv")
        assert len(parsed) == 4                      # header written once

    def test_deterministic_runs_are_byte_identical(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            cfg = tiny_config(out_dir=str(tmp_path / name))
            trainer.train(cfg)
            outs.append((
                (tmp_path / name / "metrics.csv").read_bytes(),
                (tmp_path / name / "checkpoint.bin").read_bytes(),
            ))
        assert outs[0][0] == outs[1][0]
        assert outs[0][1] == outs[1][1]

    def test_different_seeds_differ(self, tmp_path):
        r1, _ = trainer.train(tiny_config(seed=5))
        r2, _ = trainer.train(tiny_config(seed=6))
        assert any(a.loss != b.loss for a, b in zip(r1, r2))

    def test_data_order_shared_across_presets(self, monkeypatch):
        seen = {}
        original = trainer.sequence_forward

        def recorder(model, batch):
            seen.setdefault(key, []).append(np.asarray(batch.inputs).copy())
            return original(model, batch)

        monkeypatch.setattr(trainer, "sequence_forward", recorder)
        for key in ("fp32", "floatsd8"):
            trainer.train(tiny_config(preset=key, epochs=1))
        fp32_batches = [b for b in seen["fp32"]]
        q_batches = [b for b in seen["floatsd8"]]
        assert len(fp32_batches) == len(q_batches)
        for a, b in zip(fp32_batches, q_batches):
            assert np.array_equal(a, b)

    def test_divergence_aborts_with_diagnostic(self, monkeypatch):
        cfg = tiny_config(preset="fp32")

        def explode(model, batch):
            return math.nan, {"n": 1, "correct": 0}, None

        monkeypatch.setattr(trainer, "sequence_forward", explode)
        with pytest.raises(RuntimeError, match="diverged"):
            trainer.train(cfg)

    def test_bad_out_dir_reports_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        cfg = tiny_config(out_dir=str(blocker / "sub"))
        with pytest.raises(RuntimeError, match="sub"):
            trainer.train(cfg)


class TestEvaluate:
    def test_eval_after_train_reproduces_validation_exactly(self, tmp_path):
        cfg = tiny_config(out_dir=str(tmp_path), epochs=2)
        records, ckpt = trainer.train(cfg)
        final_valid = [r for r in records if r.split == "valid"][-1]
        rec = trainer.evaluate(ckpt, cfg.task, batch_size=cfg.batch_size)
        assert rec.loss == final_valid.loss
        assert rec.metric_value == final_valid.metric_value

    def test_untrained_lm_perplexity_near_vocab_size(self, tmp_path):
        task = TaskSpec("char-lm", length=20, n_train=8, n_valid=32, seed=0)
        cfg = RunConfig(task=task, preset="floatsd8", embed_dim=8, hidden_size=16,
                        epochs=0, batch_size=8, lr=1e-3, seed=2,
                        out_dir=str(tmp_path), deterministic=True)
        _, ckpt = trainer.train(cfg)
        rec = trainer.evaluate(ckpt, task)
        assert abs(rec.metric_value - 26) / 26 < 0.05

    def test_dim_mismatch_rejected(self, tmp_path):
        cfg = tiny_config(out_dir=str(tmp_path))
        _, ckpt = trainer.train(cfg)
        other = TaskSpec("copy", vocab=6, length=3, n_train=8, n_valid=8, seed=1)
        with pytest.raises(ValueError, match="vocabulary"):
            trainer.evaluate(ckpt, other)


class TestAblation:
    def test_shadow_rows_are_identical(self):
        cfg = tiny_config(preset="fp32", epochs=1)
        rows = trainer.precision_ablation(
            cfg, [("fp8", "fp8", "fp8"), ("fp16", "fp16", "fp16")])
        assert rows[0]["loss"] == rows[1]["loss"]
        assert rows[0]["metric_value"] == rows[1]["metric_value"]

    def test_quantized_rows_complete_and_log(self, tmp_path):
        cfg = tiny_config(epochs=1)
        out = tmp_path / "ablation.csv"
        rows = trainer.precision_ablation(
            cfg, [("fp8", "fp8", "fp8"), ("fp8", "fp16", "fp8")], str(out))
        assert len(rows) == 2
        assert out.exists()
        text = out.read_text().splitlines()
        assert text[0] == "first,last,other,loss,metric_name,metric_value"
        assert len(text) == 3

    def test_rejects_non_minifloat_rows(self):
        with pytest.raises(ValueError):
            trainer.precision_ablation(tiny_config(), [("int4", "fp8", "fp8")])

    def test_fp16_last_layer_not_worse_beyond_frozen_margin(self):
        # frozen regression margin: 10% relative (calibrated once)
        task = TaskSpec("char-lm", length=30, n_train=256, n_valid=64, seed=1)
        cfg = RunConfig(task=task, preset="floatsd8", embed_dim=16, hidden_size=32,
                        epochs=2, batch_size=32, lr=3e-3, seed=3, deterministic=True)
        rows = trainer.precision_ablation(
            cfg, [("fp8", "fp8", "fp8"), ("fp8", "fp16", "fp8")])
        ppl_fp8_last = rows[0]["metric_value"]
        ppl_fp16_last = rows[1]["metric_value"]
        assert ppl_fp16_last <= 1.10 * ppl_fp8_last


class TestCSVChecker:
    def test_rejects_bad_header(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("epoch,loss\n1,2\n")
        with pytest.raises(ValueError, match="header"):
            check_metrics_csv(p)

    def test_rejects_bad_split(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("epoch,split,loss,metric_name,metric_value,seconds\n"
                     "1,test,0.5,accuracy,0.5,0.0\n")
        with pytest.raises(ValueError, match="split"):
            check_metrics_csv(p)

    def test_rejects_decreasing_epochs(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("epoch,split,loss,metric_name,metric_value,seconds\n"
                     "2,train,0.5,accuracy,0.5,0.0\n"
                     "1,train,0.5,accuracy,0.5,0.0\n")
        with pytest.raises(ValueError, match="nondecreasing"):
            check_metrics_csv(p)
