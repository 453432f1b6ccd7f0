"""Batches, a whitespace tokenizer, synthetic token tasks and file loaders."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

PAD, UNK = 0, 1
MAX_TOKENS = 512

SYNTHETIC_TASKS = ("xor-tokens", "two-moons-tokens", "linear-regression-tokens")


class DatasetError(ValueError):
    """Malformed or empty dataset input."""


@dataclass
class Batch:
    """A set of examples: token ids (or dense feature rows) plus targets.

    Exactly one of ``ids`` (int, ``(B, L)``) and ``features`` (float,
    ``(B, F)``) is set. ``mask`` is ``(B, L)`` with 1 for real tokens; dense
    batches use ``L == 1``.
    """

    targets: np.ndarray
    task: str = "classification"
    ids: np.ndarray | None = None
    features: np.ndarray | None = None
    mask: np.ndarray | None = None
    n_classes: int | None = None
    bayes_accuracy: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if (self.ids is None) == (self.features is None):
            raise ValueError("a batch carries exactly one of ids or features")
        if self.ids is not None:
            self.ids = np.asarray(self.ids, dtype=np.int64)
            if self.ids.ndim != 2:
                raise ValueError("ids must be (batch, length)")
            if self.mask is None:
                self.mask = np.ones(self.ids.shape)
        else:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2:
                raise ValueError("features must be (batch, n_features)")
            self.mask = np.ones((len(self.features), 1))
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.task == "classification":
            self.targets = np.asarray(self.targets, dtype=np.int64)
        else:
            self.targets = np.asarray(self.targets, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def seq_len(self) -> int:
        return self.mask.shape[1]

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(
            targets=self.targets[idx],
            task=self.task,
            ids=None if self.ids is None else self.ids[idx],
            features=None if self.features is None else self.features[idx],
            mask=self.mask[idx],
            n_classes=self.n_classes,
        )


def batches(data: Batch, batch_size: int, rng: np.random.Generator | None = None) -> list[Batch]:
    """Split ``data`` into consecutive minibatches (shuffled if ``rng`` given)."""
    order = np.arange(len(data)) if rng is None else rng.permutation(len(data))
    return [data.subset(order[i:i + batch_size]) for i in range(0, len(data), batch_size)]


def batch_stream(data: Batch, batch_size: int, seed: int) -> Iterator[Batch]:
    """Endless minibatch stream, reshuffled every epoch."""
    rng = np.random.default_rng(seed)
    while True:
        yield from batches(data, batch_size, rng)


class Vocab:
    """Whitespace + lowercase vocabulary. Ids 0 and 1 are padding and unknown."""

    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @staticmethod
    def tokenize(text: str) -> list[str]:
        return text.lower().split()

    @classmethod
    def build(cls, texts) -> "Vocab":
        tokens = ["<pad>", "<unk>"]
        seen = set(tokens)
        for text in texts:
            for tok in cls.tokenize(text):
                if tok not in seen:
                    seen.add(tok)
                    tokens.append(tok)
        return cls(tokens)

    def encode(self, text: str, max_len: int = MAX_TOKENS) -> list[int]:
        return [self.index.get(tok, UNK) for tok in self.tokenize(text)[:max_len]]

    def save(self, path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.tokens))

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text().splitlines())


def _pad(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    length = max(1, max(len(s) for s in seqs))
    ids = np.full((len(seqs), length), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), length))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def _labels(raw: list, where: list[str]):
    if all(isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in raw):
        labels = np.asarray(raw, dtype=np.int64)
        if labels.min() < 0:
            bad = int(np.argmin(labels))
            raise DatasetError(f"{where[bad]}: negative class label {labels[bad]}")
        return labels, "classification", int(labels.max()) + 1
    return np.asarray(raw, dtype=np.float64), "regression", None


def load_dataset(path, fmt: str | None = None, vocab: Vocab | None = None,
                 max_len: int = MAX_TOKENS) -> tuple[Batch, Vocab | None]:
    """Read a JSONL or CSV file into a single ``Batch``.

    Text rows are tokenized with ``vocab``; when none is given one is built
    from this file (treat it as the training split). Sequences are truncated
    to ``max_len`` tokens. Rows with dense features bypass the tokenizer.
    Returns ``(batch, vocab)`` where ``vocab`` is ``None`` for dense data.
    """
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt not in ("jsonl", "csv"):
        raise DatasetError(f"unsupported format {fmt!r}; expected jsonl or csv")
    rows = _read_jsonl(path) if fmt == "jsonl" else _read_csv(path)
    if not rows:
        raise DatasetError(f"{path}: no rows")

    where = [f"{path}:{lineno}" for lineno, _, _ in rows]
    kinds = {type(x) for _, x, _ in rows}
    if len(kinds) != 1:
        raise DatasetError(f"{path}: rows mix text and feature inputs")
    targets, task, n_classes = _labels([y for _, _, y in rows], where)

    if kinds == {str}:
        texts = [x for _, x, _ in rows]
        vocab = vocab or Vocab.build(texts)
        ids, mask = _pad([vocab.encode(t, max_len) for t in texts])
        batch = Batch(targets=targets, task=task, ids=ids, mask=mask, n_classes=n_classes)
        return batch, vocab

    widths = {len(x) for _, x, _ in rows}
    if len(widths) != 1:
        lineno = next(n for n, x, _ in rows if len(x) != len(rows[0][1]))
        raise DatasetError(f"{path}:{lineno}: feature width differs from first row")
    features = np.array([x for _, x, _ in rows], dtype=np.float64)
    return Batch(targets=targets, task=task, features=features, n_classes=n_classes), None


def _read_jsonl(path: Path) -> list[tuple[int, object, object]]:
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or "label" not in obj:
                raise DatasetError(f"{path}:{lineno}: row needs a 'label' field")
            if "text" in obj and isinstance(obj["text"], str):
                x = obj["text"]
            elif "features" in obj and isinstance(obj["features"], list):
                try:
                    x = tuple(float(v) for v in obj["features"])
                except (TypeError, ValueError):
                    raise DatasetError(f"{path}:{lineno}: non-numeric feature") from None
            else:
                raise DatasetError(f"{path}:{lineno}: row needs 'text' (string) or 'features' (list)")
            label = obj["label"]
            if isinstance(label, bool) or not isinstance(label, (int, float)):
                raise DatasetError(f"{path}:{lineno}: label must be a number")
            rows.append((lineno, x, label))
    return rows


def _parse_label(raw: str):
    try:
        return int(raw)
    except ValueError:
        return float(raw)


def _read_csv(path: Path) -> list[tuple[int, object, object]]:
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        text_col = header.index("text") if "text" in header[:-1] else None
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                label = _parse_label(row[-1])
                if text_col is not None:
                    x = row[text_col]
                else:
                    x = tuple(float(v) for v in row[:-1])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: could not parse numeric field") from None
            rows.append((lineno, x, label))
    return rows


# synthetic tasks


def _flip(labels: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    flips = rng.random(len(labels)) < noise
    return np.where(flips, 1 - labels, labels)


def _xor_tokens(n, rng, seq_len, n_filler, label_noise):
    key_a, key_b, first_filler = 2, 3, 4
    ids = rng.integers(first_filler, first_filler + n_filler, size=(n, seq_len))
    a = rng.random(n) < 0.5
    b = rng.random(n) < 0.5
    # two distinct slots per row for the keywords
    slots = np.argsort(rng.random((n, seq_len)), axis=1)[:, :2]
    rows = np.arange(n)
    ids[rows[a], slots[a, 0]] = key_a
    ids[rows[b], slots[b, 1]] = key_b
    clean = (a ^ b).astype(np.int64)
    return ids, _flip(clean, label_noise, rng), clean


def _two_moons_tokens(n, rng, seq_len, n_filler, label_noise):
    # keyword groups {2,3} and {4,5}; label 1 when both groups appear in
    # near-equal numbers, which is not linearly separable in pooled counts
    first_filler = 6
    ids = rng.integers(first_filler, first_filler + n_filler, size=(n, seq_len))
    n_a = rng.integers(0, seq_len // 2 + 1, size=n)
    n_b = rng.integers(0, seq_len // 2 + 1, size=n)
    order = np.argsort(rng.random((n, seq_len)), axis=1)
    for i in range(n):
        slots = order[i]
        ids[i, slots[:n_a[i]]] = rng.integers(2, 4, size=n_a[i])
        ids[i, slots[n_a[i]:n_a[i] + n_b[i]]] = rng.integers(4, 6, size=n_b[i])
    clean = (np.abs(n_a - n_b) <= 1).astype(np.int64)
    return ids, _flip(clean, label_noise, rng), clean


def make_synthetic(name: str, seed: int, n_train: int = 512, n_eval: int = 512,
                   seq_len: int = 6, n_filler: int = 8, label_noise: float = 0.0,
                   target_noise: float = 0.1) -> tuple[Batch, Batch]:
    """Generate a deterministic synthetic token task.

    ``xor-tokens``: label = (keyword A present) XOR (keyword B present).
    ``two-moons-tokens``: label = 1 iff two keyword groups have counts within
    one of each other. ``linear-regression-tokens``: target is the mean of
    fixed per-token weights plus Gaussian noise.

    Classification labels are flipped with probability ``label_noise``, so
    the Bayes-optimal accuracy (stored on the returned batches) is
    ``1 - label_noise``. Returns disjoint ``(train, eval)`` splits.
    """
    if name not in SYNTHETIC_TASKS:
        raise ValueError(f"unknown synthetic task {name!r}; choose from {SYNTHETIC_TASKS}")
    rng = np.random.default_rng(seed)
    n = n_train + n_eval
    if name == "linear-regression-tokens":
        vocab_size = 2 + n_filler
        weights = np.concatenate([[0.0, 0.0], rng.normal(size=n_filler)])
        ids = rng.integers(2, vocab_size, size=(n, seq_len))
        targets = weights[ids].mean(axis=1) + target_noise * rng.normal(size=n)
        full = Batch(targets=targets, task="regression", ids=ids)
    else:
        gen = _xor_tokens if name == "xor-tokens" else _two_moons_tokens
        ids, labels, _ = gen(n, rng, seq_len, n_filler, label_noise)
        full = Batch(targets=labels, task="classification", ids=ids, n_classes=2,
                     bayes_accuracy=1.0 - label_noise)
    train, evals = full.subset(np.arange(n_train)), full.subset(np.arange(n_train, n))
    train.bayes_accuracy = evals.bayes_accuracy = full.bayes_accuracy
    return train, evals


def synthetic_vocab_size(name: str, n_filler: int = 8) -> int:
    return {"xor-tokens": 4, "two-moons-tokens": 6, "linear-regression-tokens": 2}[name] + n_filler


def bayes_rule(name: str, data: Batch) -> np.ndarray:
    """Noise-free labelling rule of a synthetic classification task."""
    ids = data.ids
    if name == "xor-tokens":
        return ((ids == 2).any(axis=1) ^ (ids == 3).any(axis=1)).astype(np.int64)
    if name == "two-moons-tokens":
        n_a = np.isin(ids, (2, 3)).sum(axis=1)
        n_b = np.isin(ids, (4, 5)).sum(axis=1)
        return (np.abs(n_a - n_b) <= 1).astype(np.int64)
    raise ValueError(f"no Bayes rule for {name!r}")
