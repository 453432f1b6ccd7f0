"""Reverse-mode automatic differentiation on a recorded tape.

Ops are evaluated eagerly as they are recorded, so a tape doubles as a
trace of the forward pass. The recorded graph can be replayed with new
input bindings (``Tape.forward``) and differentiated (``Tape.backward``).

Typical usage::

    tape = Tape()
    x = tape.input("x", [1.0, 2.0])
    w = tape.input("w", [3.0, 4.0])
    y = (x * w).sum()
    tape.backward({"x", "w"})["x"]   # -> array([3., 4.])
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

LOG_FLOOR = 1e-12

OP_KINDS = (
    "add", "sub", "mul", "matmul", "embedding", "relu", "tanh",
    "softmax", "log", "sum", "mean", "square",
)


class ShapeError(ValueError):
    """Input shapes are inconsistent with the recorded graph."""


class NumericError(FloatingPointError):
    """A non-finite value appeared during evaluation."""


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undoes numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class Node:
    """Handle to one recorded value on a tape."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self) -> tuple:
        return self.tape.values[self.id].shape

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return self.tape.record("add", self, self._lift(other))

    def __radd__(self, other):
        return self.tape.record("add", self._lift(other), self)

    def __sub__(self, other):
        return self.tape.record("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.record("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.tape.record("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.tape.record("mul", self._lift(other), self)

    def __neg__(self):
        return self.tape.record("mul", self.tape.const(-1.0), self)

    def __matmul__(self, other):
        return self.tape.record("matmul", self, self._lift(other))

    def sum(self, axis=None):
        return self.tape.record("sum", self, axis=axis)

    def mean(self, axis=None):
        return self.tape.record("mean", self, axis=axis)

    def __repr__(self):
        kind = self.tape.nodes[self.id][0]
        return f"Node(id={self.id}, kind={kind}, shape={self.shape})"


class Tape:
    """Ordered record of ops; single-writer.

    Each entry of ``nodes`` is ``(kind, input_ids, attrs)``. Leaves are
    ``("input", (), {"name": ...})`` and ``("const", (), {})``. Because a
    node can only consume nodes recorded before it, ``nodes`` is always in
    topological order.
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple[int, ...], dict]] = []
        self.values: list[np.ndarray] = []
        self.names: dict[str, int] = {}
        self.output: int | None = None

    # leaves

    def input(self, name: str, value) -> Node:
        if name in self.names:
            raise ValueError(f"input {name!r} already bound on this tape")
        arr = _as_array(value)
        self.names[name] = len(self.nodes)
        return self._append("input", (), {"name": name}, arr)

    def const(self, value) -> Node:
        return self._append("const", (), {}, _as_array(value))

    def _append(self, kind, ids, attrs, value) -> Node:
        self.nodes.append((kind, ids, attrs))
        self.values.append(value)
        return Node(self, len(self.nodes) - 1)

    # ops

    def record(self, kind: str, *args: Node, **attrs) -> Node:
        for a in args:
            if a.tape is not self:
                raise ValueError("cannot mix nodes from different tapes")
        ids = tuple(a.id for a in args)
        value = self._eval(len(self.nodes), kind, [self.values[i] for i in ids], attrs)
        node = self._append(kind, ids, attrs, value)
        self.output = node.id
        return node

    def _eval(self, node_id: int, kind: str, xs: list, attrs: dict) -> np.ndarray:
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                out = _FORWARD[kind](xs, attrs)
        except ValueError as exc:
            shapes = [x.shape for x in xs]
            raise ShapeError(f"node {node_id} ({kind}): bad operand shapes {shapes}") from exc
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite value produced at node {node_id} ({kind})")
        return out

    # evaluation

    def forward(self, inputs: dict | None = None, output: Node | int | None = None) -> np.ndarray:
        """Replay the recorded graph with (optionally) rebound inputs.

        Unbound inputs keep their recorded values. The replay overwrites the
        stored values, so a subsequent ``backward`` differentiates at the new
        point.
        """
        inputs = inputs or {}
        unknown = set(inputs) - set(self.names)
        if unknown:
            raise KeyError(f"unknown inputs: {sorted(unknown)}")
        for name, value in inputs.items():
            nid = self.names[name]
            arr = _as_array(value)
            if arr.shape != self.values[nid].shape:
                raise ShapeError(
                    f"input {name!r}: expected shape {self.values[nid].shape}, got {arr.shape}"
                )
            self.values[nid] = arr
        for nid, (kind, ids, attrs) in enumerate(self.nodes):
            if kind in ("input", "const"):
                continue
            self.values[nid] = self._eval(nid, kind, [self.values[i] for i in ids], attrs)
        return self.values[self._output_id(output)]

    def backward(self, wrt: Iterable[str], output: Node | int | None = None) -> dict[str, np.ndarray]:
        """Gradients of the scalar output with respect to the named inputs."""
        wrt = list(wrt)
        for name in wrt:
            if name not in self.names:
                raise KeyError(f"no input named {name!r} on this tape")
        out_id = self._output_id(output)
        if self.values[out_id].size != 1:
            raise ValueError(
                f"backward needs a scalar output, node {out_id} has shape {self.values[out_id].shape}"
            )
        grads: dict[int, np.ndarray] = {out_id: np.ones_like(self.values[out_id])}
        for nid in range(out_id, -1, -1):
            kind, ids, attrs = self.nodes[nid]
            if kind in ("input", "const") or nid not in grads:
                continue
            g = grads.pop(nid)
            xs = [self.values[i] for i in ids]
            parts = _BACKWARD[kind](g, xs, self.values[nid], attrs)
            for i, part in zip(ids, parts):
                if part is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + part
                else:
                    grads[i] = part
        result = {}
        for name in wrt:
            nid = self.names[name]
            result[name] = grads.get(nid, np.zeros_like(self.values[nid]))
        return result

    def _output_id(self, output) -> int:
        if isinstance(output, Node):
            return output.id
        if output is not None:
            return int(output)
        if self.output is None:
            raise ValueError("tape has no recorded ops")
        return self.output


# functional spellings


def matmul(a: Node, b: Node) -> Node:
    return a.tape.record("matmul", a, a._lift(b))


def embedding(table: Node, ids) -> Node:
    """Row lookup ``table[ids]``; ``ids`` is a constant integer array."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"embedding id out of range [0, {n_rows})")
    return table.tape.record("embedding", table, ids=ids)


def relu(a: Node) -> Node:
    return a.tape.record("relu", a)


def tanh(a: Node) -> Node:
    return a.tape.record("tanh", a)


def softmax(a: Node) -> Node:
    """Softmax over the last axis."""
    return a.tape.record("softmax", a)


def log(a: Node) -> Node:
    """Natural log with the input clamped at ``LOG_FLOOR``."""
    return a.tape.record("log", a)


def square(a: Node) -> Node:
    return a.tape.record("square", a)


def sum(a: Node, axis=None) -> Node:  # noqa: A001
    return a.tape.record("sum", a, axis=axis)


def mean(a: Node, axis=None) -> Node:
    return a.tape.record("mean", a, axis=axis)


def _check_rank(x: np.ndarray, kind: str):
    if x.ndim > 2:
        raise ValueError(f"{kind} supports rank <= 2")


def _fwd_binary(fn):
    def f(xs, attrs):
        _check_rank(xs[0], "binary op")
        _check_rank(xs[1], "binary op")
        return fn(xs[0], xs[1])
    return f


def _fwd_matmul(xs, attrs):
    a, b = xs
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul needs rank >= 1 operands")
    _check_rank(a, "matmul")
    _check_rank(b, "matmul")
    return np.asarray(a @ b, dtype=np.float64)


def _fwd_sum(xs, attrs):
    return np.asarray(np.sum(xs[0], axis=attrs["axis"]), dtype=np.float64)


def _fwd_mean(xs, attrs):
    return np.asarray(np.mean(xs[0], axis=attrs["axis"]), dtype=np.float64)


_FORWARD: dict[str, Callable] = {
    "add": _fwd_binary(np.add),
    "sub": _fwd_binary(np.subtract),
    "mul": _fwd_binary(np.multiply),
    "matmul": _fwd_matmul,
    "embedding": lambda xs, attrs: xs[0][attrs["ids"]],
    "relu": lambda xs, attrs: np.maximum(xs[0], 0.0),
    "tanh": lambda xs, attrs: np.tanh(xs[0]),
    "softmax": lambda xs, attrs: _softmax(xs[0]),
    "log": lambda xs, attrs: np.log(np.maximum(xs[0], LOG_FLOOR)),
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "square": lambda xs, attrs: xs[0] * xs[0],
}


def _bwd_matmul(g, xs, out, attrs):
    a, b = xs
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


def _bwd_embedding(g, xs, out, attrs):
    table = xs[0]
    grad = np.zeros_like(table)
    np.add.at(grad, attrs["ids"], g)
    return (grad,)


def _expand_reduced(g, x, axis):
    if axis is None:
        return np.broadcast_to(g, x.shape)
    return np.broadcast_to(np.expand_dims(g, axis), x.shape)


def _bwd_sum(g, xs, out, attrs):
    return (np.array(_expand_reduced(g, xs[0], attrs["axis"])),)


def _bwd_mean(g, xs, out, attrs):
    x = xs[0]
    axis = attrs["axis"]
    n = x.size if axis is None else x.shape[axis]
    return (np.array(_expand_reduced(g, x, axis)) / n,)


def _bwd_softmax(g, xs, out, attrs):
    s = out
    return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)


def _bwd_log(g, xs, out, attrs):
    x = xs[0]
    return (np.where(x > LOG_FLOOR, g / np.maximum(x, LOG_FLOOR), 0.0),)


_BACKWARD: dict[str, Callable] = {
    "add": lambda g, xs, out, attrs: (_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)),
    "sub": lambda g, xs, out, attrs: (_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)),
    "mul": lambda g, xs, out, attrs: (
        _unbroadcast(g * xs[1], xs[0].shape),
        _unbroadcast(g * xs[0], xs[1].shape),
    ),
    "matmul": _bwd_matmul,
    "embedding": _bwd_embedding,
    "relu": lambda g, xs, out, attrs: (g * (xs[0] > 0),),
    "tanh": lambda g, xs, out, attrs: (g * (1.0 - out * out),),
    "softmax": _bwd_softmax,
    "log": _bwd_log,
    "sum": _bwd_sum,
    "mean": _bwd_mean,
    "square": lambda g, xs, out, attrs: (2.0 * xs[0] * g,),
}


def check_gradient(value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]], point,
                   step: float = 1e-5) -> float:
    """Compare a ``(value, grad)`` function against central differences.

    Returns ``max_i |grad_i - fd_i| / max(1, |fd_i|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = _as_array(point)
    _, grad = value_and_grad(point)
    grad = np.asarray(grad, dtype=np.float64).reshape(point.shape)
    fd = np.empty_like(point)
    flat = fd.reshape(-1)
    for i in range(point.size):
        bumped = point.copy().reshape(-1)
        bumped[i] += step
        up = float(value_and_grad(bumped.reshape(point.shape))[0])
        bumped[i] -= 2 * step
        down = float(value_and_grad(bumped.reshape(point.shape))[0])
        flat[i] = (up - down) / (2 * step)
    return float(np.max(np.abs(grad - fd) / np.maximum(1.0, np.abs(fd)), initial=0.0))


def gradcheck(build: Callable[[Tape, Node], Node], point, step: float = 1e-5) -> float:
    """Compare autodiff against central differences.

    ``build(tape, z)`` records a scalar function of the input node ``z``.
    Finite differences replay the recorded tape. Returns
    ``max_i |autodiff_i - fd_i| / max(1, |fd_i|)``.
    """
    point = _as_array(point)
    tape = Tape()
    z = tape.input("z", point)
    out = build(tape, z)
    grad = tape.backward(["z"], output=out)["z"]

    def replay(p):
        return float(tape.forward({"z": p}, output=out)), grad

    err = check_gradient(replay, point, step)
    tape.forward({"z": point}, output=out)
    return err
