"""Entropy mirror descent on two-player zero-sum matrix games.

The row player minimizes ``mu @ A @ nu`` and the column player maximizes it.
With Shannon entropy as the mirror map, a mirror step is a multiplicative
reweighting ``z_i * exp(-eta * h_i)`` followed by renormalization.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

SIMPLEX_TOL = 1e-9


class GameFormatError(ValueError):
    """A game file could not be parsed."""


@dataclass(frozen=True)
class MatrixGame:
    payoff: np.ndarray

    def __post_init__(self):
        a = np.array(self.payoff, dtype=np.float64)
        if a.ndim != 2 or min(a.shape) < 1:
            raise ValueError("payoff must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(a)):
            raise ValueError("payoff entries must be finite")
        object.__setattr__(self, "payoff", a)

    @property
    def shape(self) -> tuple[int, int]:
        return self.payoff.shape

    def value(self, mu, nu) -> float:
        return float(np.asarray(mu) @ self.payoff @ np.asarray(nu))


@dataclass(frozen=True)
class EmdConfig:
    eta: float = 0.1
    iterations: int = 1000
    simultaneous: bool = True

    def __post_init__(self):
        if not np.isfinite(self.eta) or self.eta < 0:
            raise ValueError("eta must be finite and non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def rock_paper_scissors() -> MatrixGame:
    """Entry ``[i, j]`` is what row action ``i`` pays column action ``j`` (R, P, S)."""
    return MatrixGame(np.array([[0.0, 1.0, -1.0], [-1.0, 0.0, 1.0], [1.0, -1.0, 0.0]]))


def matching_pennies() -> MatrixGame:
    return MatrixGame(np.array([[1.0, -1.0], [-1.0, 1.0]]))


def check_strategy(p, n: int | None = None, name: str = "strategy") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or (n is not None and p.size != n):
        raise ValueError(f"{name} must be a vector of length {n}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"{name} is not on the probability simplex")
    return p


def emd_step(strategy, grad, eta: float) -> np.ndarray:
    """One entropic mirror step: ``z+ ∝ z * exp(-eta * grad)``.

    Computed in log space with max-subtraction; zero-probability entries stay
    at zero, so the support never grows.
    """
    z = np.asarray(strategy, dtype=np.float64)
    h = np.asarray(grad, dtype=np.float64)
    if z.shape != h.shape:
        raise ValueError(f"gradient length {h.shape} does not match strategy {z.shape}")
    with np.errstate(divide="ignore", over="ignore"):
        # log(0) = -inf keeps zero-probability entries at zero
        logits = np.log(z) - eta * h
    top = logits.max()
    if not np.isfinite(top):
        raise FloatingPointError("mirror step annihilated all probability mass")
    w = np.exp(logits - top)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise FloatingPointError("mirror step normalizer is not a positive finite number")
    return w / total


def best_response(game: MatrixGame, opponent, side: str) -> tuple[int, float]:
    """Best pure reply to ``opponent``; ties go to the smallest index.

    ``side="row"`` minimizes ``A @ nu``; ``side="col"`` maximizes ``mu @ A``.
    """
    a = game.payoff
    if side == "row":
        values = a @ check_strategy(opponent, a.shape[1], "column strategy")
        idx = int(np.argmin(values))
    elif side == "col":
        values = check_strategy(opponent, a.shape[0], "row strategy") @ a
        idx = int(np.argmax(values))
    else:
        raise ValueError("side must be 'row' or 'col'")
    return idx, float(values[idx])


def exploitability(game: MatrixGame, mu, nu) -> float:
    """Nash gap ``max_j (mu A)_j - min_i (A nu)_i``; zero exactly at equilibrium."""
    _, upper = best_response(game, mu, "col")
    _, lower = best_response(game, nu, "row")
    return upper - lower


def solve_zero_sum(game: MatrixGame, config: EmdConfig = EmdConfig()):
    """Run entropic mirror descent from uniform strategies.

    Produces ``T = config.iterations`` iterates (``T - 1`` updates) and
    returns ``(mu_bar, nu_bar, trace)``: the uniform averages of the iterate
    sequences and, for each ``t``, the exploitability of the running
    averages over the first ``t`` iterates.

    With ``simultaneous=False`` the column player moves first and the row
    player responds to the updated column strategy.
    """
    a = game.payoff
    n_rows, n_cols = a.shape
    mu = np.full(n_rows, 1.0 / n_rows)
    nu = np.full(n_cols, 1.0 / n_cols)
    mu_sum = np.zeros(n_rows)
    nu_sum = np.zeros(n_cols)
    trace = np.empty(config.iterations)
    for t in range(config.iterations):
        mu_sum += mu
        nu_sum += nu
        # same arithmetic as exploitability(), without re-validating the averages
        trace[t] = np.max((mu_sum / (t + 1)) @ a) - np.min(a @ (nu_sum / (t + 1)))
        if t == config.iterations - 1:
            break
        if config.simultaneous:
            mu, nu = emd_step(mu, a @ nu, config.eta), emd_step(nu, -(mu @ a), config.eta)
        else:
            nu = emd_step(nu, -(mu @ a), config.eta)
            mu = emd_step(mu, a @ nu, config.eta)
    t_total = config.iterations
    return mu_sum / t_total, nu_sum / t_total, trace


def gibbs_density_log(history, sign: float = -1.0) -> np.ndarray:
    """Unnormalized log-weights ``sign * sum_t h_t`` over a finite strategy set.

    ``sign=-1`` gives the minimizing player's density, ``sign=+1`` the
    maximizing player's. Normalizing ``exp`` of the result reproduces the
    mirror-descent iterate after ``len(history)`` steps at unit step size
    from the uniform distribution.
    """
    hs = [np.asarray(h, dtype=np.float64) for h in history]
    if not hs:
        raise ValueError("history must contain at least one gradient vector")
    if len({h.shape for h in hs}) != 1 or hs[0].ndim != 1:
        raise ValueError("all gradient vectors must be 1-D and the same length")
    return sign * np.sum(hs, axis=0)


def normalize_log_weights(logw) -> np.ndarray:
    logw = np.asarray(logw, dtype=np.float64)
    w = np.exp(logw - logw.max())
    return w / w.sum()


# plain-text game files: "R C" then R rows of C floats


def parse_game(text: str, source: str = "<string>") -> MatrixGame:
    lines = [(i, ln.strip()) for i, ln in enumerate(text.splitlines(), start=1)]
    lines = [(i, ln) for i, ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise GameFormatError(f"{source}: empty game file")
    lineno, header = lines[0]
    try:
        n_rows, n_cols = (int(v) for v in header.split())
    except ValueError:
        raise GameFormatError(f"{source}:{lineno}: header must be two integers 'R C'") from None
    if n_rows < 1 or n_cols < 1:
        raise GameFormatError(f"{source}:{lineno}: R and C must be >= 1")
    body = lines[1:]
    if len(body) != n_rows:
        where = body[-1][0] if body else lineno
        raise GameFormatError(f"{source}:{where}: expected {n_rows} rows, found {len(body)}")
    rows = []
    for lineno, ln in body:
        try:
            row = [float(v) for v in ln.split()]
        except ValueError:
            raise GameFormatError(f"{source}:{lineno}: non-numeric entry") from None
        if len(row) != n_cols:
            raise GameFormatError(f"{source}:{lineno}: expected {n_cols} values, got {len(row)}")
        if not all(np.isfinite(row)):
            raise GameFormatError(f"{source}:{lineno}: non-finite entry")
        rows.append(row)
    return MatrixGame(np.array(rows))


def load_game(path) -> MatrixGame:
    path = Path(path)
    return parse_game(path.read_text(), str(path))


def format_game(game: MatrixGame) -> str:
    n_rows, n_cols = game.shape
    lines = [f"{n_rows} {n_cols}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in game.payoff]
    return "\n".join(lines) + "\n"
