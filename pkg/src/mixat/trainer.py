"""Mixed-strategy adversarial training and its baselines.

MAT alternates two short Langevin chains per outer step: an ascent chain
over the embedding perturbation ``delta`` (clipped to a ball after every
step) and a descent chain over the parameters ``theta``. Each chain keeps
an exponential moving average, and the parameter average is mixed back into
``theta`` at the end of the step.
"""

from __future__ import annotations

import json
import struct
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Batch, batch_stream, batches
from .losses import deviation, task_loss
from .models import (
    ModelSpec, ParameterVector, bind_params, embed, embedded_shape, eval_metric,
    record_embed, record_logits,
)
from .samplers import Preconditioner, SamplerConfig, make_state, sample_chain

ESTIMATORS = ("ema-mean", "per-sample")
METRICS_SCHEMA = 1
CHECKPOINT_MAGIC = b"MIXATCKPT"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """A non-finite quantity stopped a training run."""

    def __init__(self, step: int, quantity: str):
        super().__init__(f"run diverged at step {step}: non-finite {quantity}")
        self.step = step
        self.quantity = quantity


@dataclass(frozen=True)
class AttackBudget:
    """Budget of the PGD attack used to measure adversarial risk.

    ``step_size=None`` means a quarter of the radius per step.
    """

    steps: int = 10
    step_size: float | None = None
    radius: float = 0.5

    @property
    def step(self) -> float:
        return 0.25 * self.radius if self.step_size is None else self.step_size


@dataclass(frozen=True)
class TrainConfig:
    T: int = 100
    K: int = 5
    lam: float = 1.0
    beta: float = 0.5
    gamma: float = 0.1
    gamma_schedule: str = "constant"
    gamma_final: float = 0.0
    gamma_delta: float | None = None
    epsilon: float = 1e-4
    epsilon_delta: float | None = None
    clip_radius: float = 1e-5
    sampler: str = "sgld"
    estimator: str = "ema-mean"
    batch_size: int = 32
    seed: int = 0
    beta_delta: float | None = None
    beta_theta: float | None = None
    beta_mix: float | None = None
    pgd_steps: int | None = None
    pgd_step_size: float | None = None
    pgd_init: float = 0.5
    eval_every: int = 0
    attack: AttackBudget = field(default_factory=AttackBudget)
    log_theta_bar: bool = False

    def __post_init__(self):
        if self.T < 1 or self.K < 1:
            raise ValueError("T and K must be >= 1")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and non-negative")
        for name in ("beta", "beta_delta", "beta_theta", "beta_mix"):
            b = getattr(self, name)
            if b is not None and not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not self.clip_radius > 0:
            raise ValueError("clip radius must be positive")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.gamma_schedule not in ("constant", "linear"):
            raise ValueError("gamma schedule must be 'constant' or 'linear'")
        if self.pgd_steps is not None and self.pgd_steps < 0:
            raise ValueError("pgd_steps must be >= 0")
        if isinstance(self.attack, dict):
            object.__setattr__(self, "attack", AttackBudget(**self.attack))

    def gamma_at(self, t: int) -> float:
        if self.gamma_schedule == "constant" or self.T == 1:
            return self.gamma
        frac = t / (self.T - 1)
        return self.gamma + frac * (self.gamma_final - self.gamma)

    def sampler_config(self, gamma: float, beta: float | None, epsilon: float | None = None) -> SamplerConfig:
        return SamplerConfig(gamma=gamma, epsilon=self.epsilon if epsilon is None else epsilon,
                             kind=self.sampler, K=self.K, beta=self.beta if beta is None else beta,
                             seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = asdict(self.attack)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})


@dataclass
class RunMetrics:
    """One record per outer step plus run-level bookkeeping.

    ``wall_clock`` is kept out of ``records`` so written metrics are
    reproducible byte for byte.
    """

    mode: str
    records: list[dict] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    theta_bar_history: list[np.ndarray] = field(default_factory=list)
    grad_evals: int = 0
    max_delta_norm: float = 0.0

    @property
    def final(self) -> dict:
        return self.records[-1] if self.records else {}

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps({"schema": METRICS_SCHEMA, **rec}, sort_keys=True) + "\n")


# perturbations


def example_norms(delta: np.ndarray) -> np.ndarray:
    # an overflowing norm becomes inf, which the callers treat as out of range
    with np.errstate(over="ignore"):
        return np.sqrt(np.sum(np.square(delta.reshape(len(delta), -1)), axis=1))


def clip_perturbation(delta, radius: float) -> np.ndarray:
    """Project each example's perturbation onto the L2 ball of ``radius``.

    Rows already inside the ball are returned untouched; others are rescaled
    radially and then nudged down by ulps until the norm is ``<= radius``.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    delta = np.array(delta, dtype=np.float64)
    norms = example_norms(delta)
    for i in np.flatnonzero(norms > radius):
        row = delta[i] * (radius / norms[i])
        while np.sqrt(np.sum(row * row)) > radius:
            row = row * (1.0 - 2.0 ** -52)
        delta[i] = row
    return delta


def _normalize_rows(g: np.ndarray) -> np.ndarray:
    norms = example_norms(g)
    scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    return g * scale.reshape((-1,) + (1,) * (g.ndim - 1))


# estimates of the two partial derivatives


def _flat(delta: np.ndarray) -> np.ndarray:
    return delta.reshape(-1, delta.shape[-1])


def estimate_h_mu(theta: ParameterVector, batch: Batch, deltas, lam: float,
                  mode: str = "ema-mean") -> tuple[float, np.ndarray, dict]:
    """Objective seen by the parameter player, and its gradient in ``theta``.

    ``ema-mean``: ``L(theta) + lam * R(theta, delta_bar)`` with ``deltas``
    a single perturbation. ``per-sample``: ``deltas`` is a list of K
    perturbations and the regularizer is averaged over them, i.e.
    ``L + lam * (1/K) sum_k R(theta, delta_k)``, which equals the average of
    the K objectives.

    Returns ``(value, grad, parts)`` with ``parts = {"loss", "reg"}``.
    """
    deltas = _as_delta_list(deltas, mode)
    tape = ad.Tape()
    params = bind_params(tape, theta)
    spec = theta.spec
    x = record_embed(tape, spec, params, batch)
    clean = record_logits(tape, spec, params, x, batch.mask)
    loss = total = task_loss(clean, batch.targets, spec.task)
    reg_value = 0.0
    expected = embedded_shape(spec, batch)
    for d in deltas:
        if d.shape != expected:
            raise ValueError(f"perturbation shape {d.shape} does not match embedded input {expected}")
    if lam != 0 and deltas:
        regs = [deviation(clean, record_logits(tape, spec, params, x + _flat(d), batch.mask), spec.task)
                for d in deltas]
        reg = regs[0]
        for r in regs[1:]:
            reg = reg + r
        if len(regs) > 1:
            reg = reg * (1.0 / len(regs))
        total = loss + lam * reg
        reg_value = float(reg.value)
    grads = tape.backward([name for name, _ in spec.layout()], output=total)
    return float(total.value), theta.flatten_grads(grads), {"loss": float(loss.value), "reg": reg_value}


def estimate_h_nu(thetas, delta, batch: Batch, lam: float,
                  mode: str = "ema-mean") -> tuple[float, np.ndarray]:
    """Objective seen by the perturbation player, and its gradient in ``delta``.

    ``ema-mean``: ``lam * R(theta_bar, delta)``. ``per-sample``:
    ``lam * (1/K) sum_k R(theta_k, delta)``. The task loss does not depend on
    ``delta`` and is left out.
    """
    if mode == "ema-mean":
        if not isinstance(thetas, ParameterVector):
            raise TypeError("ema-mean mode takes a single ParameterVector")
        thetas = [thetas]
    elif mode == "per-sample":
        thetas = list(thetas)
        if not thetas:
            raise ValueError("per-sample mode needs at least one parameter sample")
    else:
        raise ValueError(f"unknown estimator mode {mode!r}")
    delta = np.asarray(delta, dtype=np.float64)
    expected = embedded_shape(thetas[0].spec, batch)
    if delta.shape != expected:
        raise ValueError(f"perturbation shape {delta.shape} does not match embedded input {expected}")
    if lam == 0:
        return 0.0, np.zeros_like(delta)
    tape = ad.Tape()
    d = tape.input("delta", _flat(delta))
    reg = None
    for th in thetas:
        params = bind_params(tape, th, const=True)
        x = record_embed(tape, th.spec, params, batch)
        clean = record_logits(tape, th.spec, params, x, batch.mask)
        r = deviation(clean, record_logits(tape, th.spec, params, x + d, batch.mask), th.spec.task)
        reg = r if reg is None else reg + r
    if len(thetas) > 1:
        reg = reg * (1.0 / len(thetas))
    total = lam * reg
    grad = tape.backward(["delta"], output=total)["delta"]
    return float(total.value), grad.reshape(delta.shape)


def _as_delta_list(deltas, mode: str) -> list[np.ndarray]:
    if deltas is None:
        return []
    if mode == "ema-mean":
        return [np.asarray(deltas, dtype=np.float64)]
    if mode == "per-sample":
        out = [np.asarray(d, dtype=np.float64) for d in deltas]
        if not out:
            raise ValueError("per-sample mode needs at least one perturbation sample")
        return out
    raise ValueError(f"unknown estimator mode {mode!r}")


def regularizer_and_grad(theta: ParameterVector, batch: Batch, delta: np.ndarray) -> tuple[float, np.ndarray]:
    """``R(theta, delta)`` and its gradient in ``delta``."""
    return estimate_h_nu(theta, delta, batch, 1.0)


# attacks and evaluation


def pgd_attack(theta: ParameterVector, batch: Batch, steps: int, step_size: float, radius: float,
               rng: np.random.Generator, init_scale: float = 0.5) -> np.ndarray:
    """Projected ascent on ``R`` with per-example L2-normalized steps.

    The start point is a random direction of norm ``init_scale * radius``;
    at ``delta = 0`` the gradient of the divergence vanishes, so a zero
    start would never move.
    """
    shape = embedded_shape(theta.spec, batch)
    delta = _normalize_rows(rng.standard_normal(shape)) * (init_scale * radius)
    delta = clip_perturbation(delta, radius)
    for _ in range(steps):
        _, g = regularizer_and_grad(theta, batch, delta)
        delta = clip_perturbation(delta + step_size * _normalize_rows(g), radius)
    return delta


def adversarial_risk_eval(theta: ParameterVector, data: Batch, budget: AttackBudget = AttackBudget(),
                          seed: int = 0, batch_size: int = 256) -> float:
    """Per-example mean of ``R(theta, delta*)`` with ``delta*`` found by PGD."""
    if budget.radius == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    total = 0.0
    for b in batches(data, batch_size):
        delta = pgd_attack(theta, b, budget.steps, budget.step, budget.radius, rng)
        value, _ = regularizer_and_grad(theta, b, delta)
        total += value * len(b)
    return total / len(data)


# training loops


def _seeds(seed: int) -> dict[str, int]:
    init, data, noise, attack = np.random.SeedSequence(seed).generate_state(4)
    return {"init": int(init), "data": int(data), "noise": int(noise), "attack": int(attack)}


def _check_finite(step: int, **values):
    for name, v in values.items():
        if not np.all(np.isfinite(v)):
            raise TrainingDiverged(step, name)


@contextmanager
def _diverges_at(step: int):
    """Report tape and sampler numeric failures as a diverged run."""
    try:
        yield
    except (ad.NumericError, FloatingPointError) as exc:
        raise TrainingDiverged(step, str(exc)) from exc


class _Run:
    """Shared setup and per-step logging for the three trainers."""

    def __init__(self, mode, spec, train, config, eval_data, theta0):
        if len(train) == 0:
            raise ValueError("training data is empty")
        self.spec = spec
        self.config = config
        self.eval_data = eval_data
        self.seeds = _seeds(config.seed)
        self.theta = theta0.copy() if theta0 is not None else ParameterVector.init(spec, self.seeds["init"])
        self.stream = batch_stream(train, config.batch_size, self.seeds["data"])
        self.rng = np.random.default_rng(self.seeds["noise"])
        self.metrics = RunMetrics(mode)
        self.t0 = time.perf_counter()

    def log(self, t: int, loss: float, reg: float, max_delta: float = 0.0):
        c = self.config
        rec = {"step": t, "loss": loss, "reg": reg, "eval": None, "adv_risk": None,
               "max_delta_norm": max_delta, "grad_evals": self.metrics.grad_evals}
        last = t == c.T - 1
        if self.eval_data is not None and (last or (c.eval_every and (t + 1) % c.eval_every == 0)):
            rec["eval"] = eval_metric(self.theta, self.eval_data)
            rec["adv_risk"] = adversarial_risk_eval(self.theta, self.eval_data, c.attack, self.seeds["attack"])
        self.metrics.records.append(rec)
        self.metrics.wall_clock.append(time.perf_counter() - self.t0)
        self.metrics.max_delta_norm = max(self.metrics.max_delta_norm, max_delta)


def vanilla_train(spec: ModelSpec, train: Batch, config: TrainConfig, eval_data: Batch | None = None,
                  theta0: ParameterVector | None = None) -> tuple[ParameterVector, RunMetrics]:
    """Plain minibatch gradient descent on the task loss, ``T`` steps."""
    run = _Run("vanilla", spec, train, config, eval_data, theta0)
    for t in range(config.T):
        batch = next(run.stream)
        with _diverges_at(t):
            value, grad, _ = estimate_h_mu(run.theta, batch, None, 0.0)
        run.metrics.grad_evals += 1
        _check_finite(t, loss=value, gradient=grad)
        run.theta = run.theta.replace(run.theta.values - config.gamma_at(t) * grad)
        run.log(t, value, 0.0)
    return run.theta, run.metrics


def pgd_baseline_train(spec: ModelSpec, train: Batch, config: TrainConfig, eval_data: Batch | None = None,
                       theta0: ParameterVector | None = None) -> tuple[ParameterVector, RunMetrics]:
    """Pure-strategy adversarial training.

    Each step runs ``pgd_steps`` (default ``K``) projected ascent steps on
    ``R`` from a random start inside the clip ball, then one descent step on
    ``L + lam * R`` at the perturbation found. No noise, no averaging.
    """
    c = config
    run = _Run("pgd", spec, train, c, eval_data, theta0)
    steps = c.K if c.pgd_steps is None else c.pgd_steps
    step_size = c.clip_radius if c.pgd_step_size is None else c.pgd_step_size
    for t in range(c.T):
        batch = next(run.stream)
        with _diverges_at(t):
            delta = pgd_attack(run.theta, batch, steps, step_size, c.clip_radius, run.rng, c.pgd_init)
            value, grad, parts = estimate_h_mu(run.theta, batch, delta, c.lam)
        run.metrics.grad_evals += steps
        run.metrics.grad_evals += 1
        _check_finite(t, loss=value, gradient=grad)
        run.theta = run.theta.replace(run.theta.values - c.gamma_at(t) * grad)
        run.log(t, parts["loss"], parts["reg"], float(example_norms(delta).max()))
    return run.theta, run.metrics


def mat_train(spec: ModelSpec, train: Batch, config: TrainConfig, eval_data: Batch | None = None,
              theta0: ParameterVector | None = None) -> tuple[ParameterVector, RunMetrics]:
    """Mixed-strategy adversarial training for ``T`` outer steps.

    Per step, on one minibatch:

    1. ``delta`` starts at zero and runs K Langevin ascent steps on
       ``lam * R(theta_bar, delta)``, clipped after each step, with EMA
       ``delta_bar``. ``theta_bar`` is the parameter average carried over
       from the previous step (``theta`` itself on the first step).
    2. ``theta`` runs K Langevin descent steps on
       ``L(theta) + lam * R(theta, delta_bar)`` with EMA ``theta_bar``.
    3. ``theta <- beta * theta + (1 - beta) * theta_bar``.

    With ``estimator="per-sample"`` the chains see the other player's K raw
    samples instead of its average. The parameter chain keeps its
    preconditioner moments across steps; the perturbation chain restarts
    them along with ``delta``.
    """
    c = config
    run = _Run("mat", spec, train, c, eval_data, theta0)
    b_delta = c.beta if c.beta_delta is None else c.beta_delta
    b_theta = c.beta if c.beta_theta is None else c.beta_theta
    b_mix = c.beta if c.beta_mix is None else c.beta_mix
    theta_state: Preconditioner | None = None
    theta_bar = run.theta.copy()
    theta_samples = [theta_bar]

    def clip(d):
        d = clip_perturbation(d, c.clip_radius)
        run.metrics.max_delta_norm = max(run.metrics.max_delta_norm, float(example_norms(d).max()))
        if run.metrics.max_delta_norm > c.clip_radius:
            raise AssertionError("perturbation escaped the clip ball")
        return d

    for t in range(c.T):
        batch = next(run.stream)
        gamma = c.gamma_at(t)
        gamma_delta = gamma if c.gamma_delta is None else c.gamma_delta
        with _diverges_at(t):
            # perturbation player: ascent, so the energy is -h_nu
            if c.estimator == "ema-mean":
                against = theta_bar
            else:
                against = theta_samples

            def delta_grad(d):
                _, g = estimate_h_nu(against, d, batch, c.lam, c.estimator)
                return -g

            delta_cfg = c.sampler_config(gamma_delta, b_delta, c.epsilon_delta)
            delta0 = np.zeros(embedded_shape(spec, batch))
            delta_samples, delta_bar = sample_chain(delta_grad, delta0, delta_cfg, run.rng,
                                                    make_state(delta_cfg), project=clip)
            run.metrics.grad_evals += c.K
            step_max = float(max(example_norms(d).max() for d in delta_samples))

            # parameter player: descent on h_mu
            opponent = delta_bar if c.estimator == "ema-mean" else delta_samples
            first: dict = {}

            def theta_grad(values):
                value, g, parts = estimate_h_mu(run.theta.replace(values), batch, opponent, c.lam, c.estimator)
                if not first:
                    first.update(parts, value=value)
                _check_finite(t, objective=value)
                return g

            theta_cfg = c.sampler_config(gamma, b_theta)
            if theta_state is None:
                theta_state = make_state(theta_cfg)
            samples, bar = sample_chain(theta_grad, run.theta.values, theta_cfg, run.rng, theta_state)
            run.metrics.grad_evals += c.K
        _check_finite(t, theta_bar=bar)

        theta_bar = run.theta.replace(bar)
        theta_samples = [run.theta.replace(s) for s in samples]
        run.theta = run.theta.replace(b_mix * run.theta.values + (1.0 - b_mix) * bar)
        if c.log_theta_bar:
            run.metrics.theta_bar_history.append(bar.copy())
        run.log(t, first["loss"], first["reg"], step_max)
    return run.theta, run.metrics


TRAINERS = {"vanilla": vanilla_train, "pgd": pgd_baseline_train, "mat": mat_train}


def grad_evals_per_step(mode: str, config: TrainConfig) -> int:
    if mode == "mat":
        return 2 * config.K
    if mode == "pgd":
        return (config.K if config.pgd_steps is None else config.pgd_steps) + 1
    return 1


# checkpoints: magic line, JSON header line, raw little-endian float64 values


def save_checkpoint(path, theta: ParameterVector, extra: dict | None = None) -> None:
    header = {"version": CHECKPOINT_VERSION, "spec": theta.spec.to_dict(),
              "layout": [[name, list(shape)] for name, shape in theta.spec.layout()],
              "n": int(theta.values.size), "extra": extra or {}}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(struct.pack(f"<{theta.values.size}d", *theta.values))


def load_checkpoint(path) -> ParameterVector:
    raw = Path(path).read_bytes()
    magic, rest = raw.split(b"\n", 1)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    header_line, payload = rest.split(b"\n", 1)
    header = json.loads(header_line)
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    values = np.frombuffer(payload, dtype="<f8")
    if values.size != header["n"]:
        raise ValueError(f"{path}: expected {header['n']} values, found {values.size}")
    return ParameterVector(ModelSpec.from_dict(header["spec"]), values.copy())
