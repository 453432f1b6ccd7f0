"""Task loss, adversarial deviation and the combined min-max objective.

Functions accept either tape nodes (and return nodes, for use inside a
larger graph) or plain arrays (and return floats).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_FLOOR
from .data import Batch
from .models import ParameterVector, bind_params, embed, record_embed, record_logits

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and non-negative, got {self.lam}")


def _check_labels(labels: np.ndarray, n_classes: int):
    if labels.dtype.kind not in "iu":
        raise ValueError("classification targets must be integer class ids")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")


def cross_entropy(logits: ad.Node, labels) -> ad.Node:
    """Mean cross-entropy of ``(B, C)`` logits against integer labels."""
    labels = np.atleast_1d(np.asarray(labels))
    n_classes = logits.shape[-1]
    _check_labels(labels, n_classes)
    onehot = np.eye(n_classes)[labels]
    logp = ad.log(ad.softmax(logits))
    return -ad.mean(ad.sum(logp * onehot, axis=-1))


def squared_error(pred: ad.Node, targets) -> ad.Node:
    targets = np.asarray(targets, dtype=np.float64).reshape(pred.shape)
    if not np.all(np.isfinite(targets)):
        raise ValueError("regression targets must be finite")
    return ad.mean(ad.square(pred - targets))


def task_loss(output, target, task: str = "classification"):
    """Cross-entropy (classification) or squared error (regression).

    ``output`` is a ``(C,)``/``(B, C)`` array of logits or a prediction
    array for regression; a tape node yields a node.
    """
    if isinstance(output, ad.Node):
        return cross_entropy(output, target) if task == "classification" else squared_error(output, target)
    tape = ad.Tape()
    out = tape.input("output", np.atleast_2d(np.asarray(output, dtype=np.float64))
                     if task == "classification" else np.asarray(output, dtype=np.float64))
    return float(task_loss(out, target, task).value)


def _check_simplex(p: np.ndarray, name: str):
    if np.any(p < -SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ValueError(f"{name} is not a probability vector (tolerance {SIMPLEX_TOL})")


def sym_kl(p, q):
    """Symmetrized KL divergence ``KL(p||q) + KL(q||p)``.

    Written as ``sum((p - q) * (log p - log q))`` with probabilities floored
    at 1e-12, which makes it symmetric bit-for-bit. For ``(B, C)`` inputs the
    per-row divergences are averaged.
    """
    if isinstance(p, ad.Node):
        q = p._lift(q)
        return ad.mean(ad.sum((p - q) * (ad.log(p) - ad.log(q)), axis=-1))
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    terms = (p - q) * (np.log(np.maximum(p, LOG_FLOOR)) - np.log(np.maximum(q, LOG_FLOOR)))
    return float(np.mean(np.sum(terms, axis=-1)))


def deviation(clean: ad.Node, perturbed: ad.Node, task: str) -> ad.Node:
    """Output deviation: symmetrized KL of the softmax outputs, or squared difference."""
    if task == "classification":
        return sym_kl(ad.softmax(clean), ad.softmax(perturbed))
    return ad.mean(ad.square(clean - perturbed))


def record_terms(tape: ad.Tape, params: dict, theta: ParameterVector, batch: Batch,
                 delta: ad.Node | None, lam: float, clean_logits: ad.Node | None = None):
    """Record task loss, regularizer and ``L + lam * R`` on ``tape``.

    ``delta`` is a ``(B*L, D)`` node (or ``None`` for the task loss alone).
    Returns ``(loss, reg, total)``; ``reg`` is ``None`` when skipped, which
    happens for ``lam == 0`` so that the total is the task loss exactly.
    """
    spec = theta.spec
    x = record_embed(tape, spec, params, batch)
    if clean_logits is None:
        clean_logits = record_logits(tape, spec, params, x, batch.mask)
    loss = task_loss(clean_logits, batch.targets, spec.task)
    if lam == 0 or delta is None:
        return loss, None, loss
    pert = record_logits(tape, spec, params, x + delta, batch.mask)
    reg = deviation(clean_logits, pert, spec.task)
    return loss, reg, loss + lam * reg


def _delta_array(theta: ParameterVector, batch: Batch, delta) -> np.ndarray:
    x = embed(theta, batch)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != x.shape:
        raise ValueError(f"perturbation shape {delta.shape} does not match embedded input {x.shape}")
    return delta.reshape(-1, x.shape[2])


def adversarial_reg(theta: ParameterVector, batch: Batch, delta) -> float:
    """Deviation between the model output on ``x`` and on ``x + delta``."""
    d = _delta_array(theta, batch, delta)
    tape = ad.Tape()
    params = bind_params(tape, theta)
    _, reg, _ = record_terms(tape, params, theta, batch, tape.input("delta", d), lam=1.0)
    return float(reg.value)


def combined_objective(theta: ParameterVector, batch: Batch, delta, config: ObjectiveConfig | float) -> float:
    """``L(theta) + lam * R(theta, delta)``."""
    lam = config.lam if isinstance(config, ObjectiveConfig) else float(ObjectiveConfig(config).lam)
    d = _delta_array(theta, batch, delta)
    tape = ad.Tape()
    params = bind_params(tape, theta)
    _, _, total = record_terms(tape, params, theta, batch, tape.input("delta", d), lam=lam)
    return float(total.value)
