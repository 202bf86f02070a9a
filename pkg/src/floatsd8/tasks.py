"""Desk-scale dataset generators: copy, adding, char-lm, tiny-tagging.

Every dataset is a pure function of its TaskSpec (including the seed), so
identical specs give byte-identical data regardless of precision preset.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

__all__ = ["TaskSpec", "Dataset", "generate_task", "TASK_KINDS"]

TASK_KINDS = ("copy", "adding", "char-lm", "tiny-tagging")


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    vocab: int = 8            # alphabet size (copy) -- ignored by file-backed tasks
    length: int = 5           # payload length (copy) / window length (char-lm, adding)
    n_train: int = 512
    n_valid: int = 128
    seed: int = 0


@dataclass
class Dataset:
    """Batches-ready arrays plus the metadata the model builder needs."""

    kind: str
    inputs_train: np.ndarray
    targets_train: np.ndarray
    inputs_valid: np.ndarray
    targets_valid: np.ndarray
    mask_train: np.ndarray | None
    mask_valid: np.ndarray | None
    input_mode: str           # "tokens" | "vector"
    vocab_size: int           # token vocabulary (0 in vector mode)
    input_dim: int            # vector-mode channel count (0 in token mode)
    output_dim: int
    loss: str                 # "ce" | "mse"
    metric: str               # "accuracy" | "perplexity" | "mae"


def _copy_task(spec: TaskSpec) -> Dataset:
    # tokens: payload symbols, then a query marker, then padding; the model
    # must reproduce the payload on the positions after the marker
    a, L = spec.vocab, spec.length
    marker, pad = a, a + 1
    rng = np.random.default_rng(spec.seed)

    def make(n):
        payload = rng.integers(0, a, (n, L))
        inputs = np.full((n, 2 * L + 1), pad, dtype=np.int64)
        inputs[:, :L] = payload
        inputs[:, L] = marker
        targets = np.zeros((n, 2 * L + 1), dtype=np.int64)
        targets[:, L + 1:] = payload
        mask = np.zeros((n, 2 * L + 1), dtype=bool)
        mask[:, L + 1:] = True
        return inputs, targets, mask

    tr = make(spec.n_train)
    va = make(spec.n_valid)
    return Dataset(spec.kind, tr[0], tr[1], va[0], va[1], tr[2], va[2],
                   "tokens", a + 2, 0, a, "ce", "accuracy")


def _adding_task(spec: TaskSpec) -> Dataset:
    # two channels per step: a value in [0, 1] and a marker; the target is
    # the sum of the two marked values
    T = max(spec.length, 2)
    rng = np.random.default_rng(spec.seed)

    def make(n):
        values = rng.uniform(0, 1, (n, T))
        marks = np.zeros((n, T))
        for row in range(n):
            i, j = rng.choice(T, size=2, replace=False)
            marks[row, i] = 1.0
            marks[row, j] = 1.0
        inputs = np.stack([values, marks], axis=-1)
        targets = (values * marks).sum(axis=1)
        return inputs, targets

    tr = make(spec.n_train)
    va = make(spec.n_valid)
    return Dataset(spec.kind, tr[0], tr[1], va[0], va[1], None, None,
                   "vector", 0, 2, 1, "mse", "mae")


def _load_text(name: str) -> str:
    return resources.files("floatsd8.data").joinpath(name).read_text()


def _char_lm_task(spec: TaskSpec) -> Dataset:
    text = _load_text("corpus.txt")
    chars = sorted(set(text))
    lookup = {c: i for i, c in enumerate(chars)}
    ids = np.array([lookup[c] for c in text], dtype=np.int64)
    T = spec.length
    split = int(len(ids) * 0.9)

    def windows(region: np.ndarray, count: int, offset_rng) -> tuple[np.ndarray, np.ndarray]:
        max_start = len(region) - T - 1
        n_slots = max_start // T + 1
        starts = (np.arange(count) % n_slots) * T
        if count > n_slots:
            starts = offset_rng.permutation(starts)
        inputs = np.stack([region[s:s + T] for s in starts])
        targets = np.stack([region[s + 1:s + T + 1] for s in starts])
        return inputs, targets

    rng = np.random.default_rng(spec.seed)
    tr = windows(ids[:split], spec.n_train, rng)
    va = windows(ids[split:], spec.n_valid, rng)
    return Dataset(spec.kind, tr[0], tr[1], va[0], va[1], None, None,
                   "tokens", len(chars), 0, len(chars), "ce", "perplexity")


def _tagging_task(spec: TaskSpec) -> Dataset:
    text = _load_text("tagging.tsv")
    sentences: list[list[tuple[str, str]]] = [[]]
    for line in text.splitlines():
        if not line.strip():
            if sentences[-1]:
                sentences.append([])
            continue
        word, tag = line.split("\t")
        sentences[-1].append((word, tag))
    sentences = [s for s in sentences if s]
    words = sorted({w for s in sentences for w, _ in s})
    tags = sorted({t for s in sentences for _, t in s})
    w_idx = {w: i for i, w in enumerate(words)}
    t_idx = {t: i for i, t in enumerate(tags)}
    pad = len(words)
    max_len = max(len(s) for s in sentences)

    def encode(batch):
        inputs = np.full((len(batch), max_len), pad, dtype=np.int64)
        targets = np.zeros((len(batch), max_len), dtype=np.int64)
        mask = np.zeros((len(batch), max_len), dtype=bool)
        for r, s in enumerate(batch):
            for c, (w, t) in enumerate(s):
                inputs[r, c] = w_idx[w]
                targets[r, c] = t_idx[t]
                mask[r, c] = True
        return inputs, targets, mask

    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(sentences))
    n_train = min(spec.n_train, len(sentences) - 1)
    n_valid = min(spec.n_valid, len(sentences) - n_train)
    tr = encode([sentences[i] for i in order[:n_train]])
    va = encode([sentences[i] for i in order[n_train:n_train + n_valid]])
    return Dataset(spec.kind, tr[0], tr[1], va[0], va[1], tr[2], va[2],
                   "tokens", len(words) + 1, 0, len(tags), "ce", "accuracy")


def generate_task(spec: TaskSpec) -> Dataset:
    """Materialize the dataset for a TaskSpec; deterministic per spec."""
    if spec.kind == "copy":
        return _copy_task(spec)
    if spec.kind == "adding":
        return _adding_task(spec)
    if spec.kind == "char-lm":
        return _char_lm_task(spec)
    if spec.kind == "tiny-tagging":
        return _tagging_task(spec)
    raise ValueError(f"unknown task kind {spec.kind!r}; expected one of {TASK_KINDS}")
