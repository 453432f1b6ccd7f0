"""Tiny embedding + MLP models expressed on the autodiff tape."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Batch

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}
INITS = ("uniform", "glorot")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a mean-pooled embedding MLP.

    ``vocab_size=None`` means dense inputs: rows of ``embed_dim`` features
    feed the MLP directly and play the role of the embedded input.
    """

    vocab_size: int | None
    embed_dim: int
    hidden: tuple[int, ...] = (16,)
    output_dim: int = 2
    task: str = "classification"
    activation: str = "relu"
    init: str = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = [self.embed_dim, self.output_dim, *self.hidden]
        if self.vocab_size is not None:
            dims.append(self.vocab_size)
        if min(dims) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "regression" and self.output_dim != 1:
            raise ValueError("regression models have output_dim == 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.init not in INITS:
            raise ValueError(f"unknown init scheme {self.init!r}; choose from {INITS}")

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        if self.vocab_size is not None:
            shapes.append(("embedding", (self.vocab_size, self.embed_dim)))
        widths = [self.embed_dim, *self.hidden, self.output_dim]
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes.append((f"W{i}", (n_in, n_out)))
            shapes.append((f"b{i}", (n_out,)))
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())

    def to_dict(self) -> dict:
        return {"vocab_size": self.vocab_size, "embed_dim": self.embed_dim,
                "hidden": list(self.hidden), "output_dim": self.output_dim,
                "task": self.task, "activation": self.activation, "init": self.init}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "hidden": tuple(d.get("hidden", (16,)))})


class ParameterVector:
    """Flat float64 parameter vector with a name -> slice layout."""

    def __init__(self, spec: ModelSpec, values):
        values = np.array(values, dtype=np.float64).reshape(-1)
        if values.size != spec.n_params:
            raise ValueError(f"expected {spec.n_params} parameters, got {values.size}")
        self.spec = spec
        self.values = values

    @classmethod
    def init(cls, spec: ModelSpec, seed: int, scale: float | None = None) -> "ParameterVector":
        """Random parameters following ``spec.init``.

        ``uniform`` draws every entry from ``U(-scale, scale)`` (``scale``
        defaults to 0.1). ``glorot`` draws embeddings from ``U(-1, 1)``,
        weight matrices Glorot-uniform and sets biases to zero; it escapes
        the near-symmetric start much faster on small nonlinear tasks.
        """
        rng = np.random.default_rng(seed)
        if spec.init == "uniform" or scale is not None:
            scale = 0.1 if scale is None else scale
            return cls(spec, rng.uniform(-scale, scale, size=spec.n_params))
        arrays = {}
        for name, shape in spec.layout():
            if name == "embedding":
                arrays[name] = rng.uniform(-1.0, 1.0, size=shape)
            elif name.startswith("W"):
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                arrays[name] = rng.uniform(-limit, limit, size=shape)
            else:
                arrays[name] = np.zeros(shape)
        return cls.from_arrays(spec, arrays)

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParameterVector":
        return cls(spec, np.zeros(spec.n_params))

    @classmethod
    def from_arrays(cls, spec: ModelSpec, arrays: dict) -> "ParameterVector":
        return cls(spec, np.concatenate(
            [np.asarray(arrays[name], dtype=np.float64).reshape(-1) for name, _ in spec.layout()]
        ))

    def unflatten(self) -> dict[str, np.ndarray]:
        out, start = {}, 0
        for name, shape in self.spec.layout():
            size = int(np.prod(shape))
            out[name] = self.values[start:start + size].reshape(shape)
            start += size
        return out

    def flatten_grads(self, grads: dict) -> np.ndarray:
        return np.concatenate([np.asarray(grads[name]).reshape(-1) for name, _ in self.spec.layout()])

    def replace(self, values) -> "ParameterVector":
        return ParameterVector(self.spec, values)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.spec, self.values.copy())

    def __len__(self):
        return self.values.size

    def __repr__(self):
        return f"ParameterVector(n={self.values.size}, spec={self.spec})"


def _check_ids(spec: ModelSpec, batch: Batch):
    if spec.vocab_size is None:
        if batch.features is None or batch.features.shape[1] != spec.embed_dim:
            raise ValueError(f"dense model expects features of width {spec.embed_dim}")
        return
    if batch.ids is None:
        raise ValueError("token model needs a batch of token ids")
    if batch.ids.size and (batch.ids.min() < 0 or batch.ids.max() >= spec.vocab_size):
        raise IndexError(f"token id out of range [0, {spec.vocab_size})")


def embedded_shape(spec: ModelSpec, batch: Batch) -> tuple[int, int, int]:
    return (len(batch), batch.seq_len, spec.embed_dim)


def pooling_matrix(mask: np.ndarray) -> np.ndarray:
    """``(B, B*L)`` matrix that mean-pools flattened ``(B*L, D)`` rows."""
    b, length = mask.shape
    counts = np.maximum(mask.sum(axis=1), 1.0)
    pool = np.zeros((b, b * length))
    for i in range(b):
        pool[i, i * length:(i + 1) * length] = mask[i] / counts[i]
    return pool


# tape-level builders


def bind_params(tape: ad.Tape, theta: ParameterVector, prefix: str = "",
                const: bool = False) -> dict[str, ad.Node]:
    """Put the weights on the tape, as named inputs or as frozen constants."""
    if const:
        return {name: tape.const(arr) for name, arr in theta.unflatten().items()}
    return {name: tape.input(prefix + name, arr) for name, arr in theta.unflatten().items()}


def record_embed(tape: ad.Tape, spec: ModelSpec, params: dict, batch: Batch) -> ad.Node:
    """Embedded input flattened to ``(B*L, D)``."""
    _check_ids(spec, batch)
    if spec.vocab_size is None:
        return tape.const(batch.features)
    return ad.embedding(params["embedding"], batch.ids.reshape(-1))


def record_logits(tape: ad.Tape, spec: ModelSpec, params: dict, embedded: ad.Node,
                  mask: np.ndarray) -> ad.Node:
    """Mean-pool the ``(B*L, D)`` embedded rows and run the MLP."""
    h = ad.matmul(tape.const(pooling_matrix(mask)), embedded)
    act = ACTIVATIONS[spec.activation]
    n_layers = len(spec.hidden) + 1
    for i in range(n_layers):
        h = h @ params[f"W{i}"] + params[f"b{i}"]
        if i < n_layers - 1:
            h = act(h)
    return h


# array-level API


def embed(theta: ParameterVector, batch: Batch) -> np.ndarray:
    """Embedding lookup, ``(B, L, D)``. Perturbations are added to this tensor."""
    spec = theta.spec
    _check_ids(spec, batch)
    if spec.vocab_size is None:
        return batch.features[:, None, :].copy()
    return theta.unflatten()["embedding"][batch.ids]


def forward_logits(theta: ParameterVector, embedded: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Model output for an already-embedded ``(B, L, D)`` input."""
    embedded = np.asarray(embedded, dtype=np.float64)
    if embedded.ndim != 3 or embedded.shape[2] != theta.spec.embed_dim:
        raise ValueError(f"embedded input must be (B, L, {theta.spec.embed_dim})")
    b, length, d = embedded.shape
    mask = np.ones((b, length)) if mask is None else mask
    tape = ad.Tape()
    params = bind_params(tape, theta)
    x = tape.input("x", embedded.reshape(b * length, d))
    return record_logits(tape, theta.spec, params, x, mask).value.copy()


def predict(theta: ParameterVector, batch: Batch) -> np.ndarray:
    return forward_logits(theta, embed(theta, batch), batch.mask)


def eval_metric(theta: ParameterVector, data: Batch) -> float:
    """Accuracy for classification, Pearson correlation for regression."""
    out = predict(theta, data)
    if data.task == "classification":
        return float(np.mean(np.argmax(out, axis=1) == data.targets))
    pred = out[:, 0]
    if np.std(pred) == 0 or np.std(data.targets) == 0:
        return 0.0
    return float(np.corrcoef(pred, data.targets)[0, 1])
