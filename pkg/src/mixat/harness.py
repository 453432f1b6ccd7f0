"""Experiment plumbing behind the command line.

Each command reads a JSON config (a dict), runs independent cells and
writes plain CSV / JSON / JSONL files. Content files never contain
timestamps, so identical configs and seeds give identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import Batch, load_dataset, make_synthetic, synthetic_vocab_size
from .game import EmdConfig, MatrixGame, load_game, solve_zero_sum
from .losses import task_loss
from .models import ModelSpec, ParameterVector
from .samplers import SamplerConfig, adjusted_normal_variance, diagnose, get_target, run_chains
from .trainer import (
    TRAINERS, TrainConfig, TrainingDiverged, estimate_h_mu, estimate_h_nu, grad_evals_per_step,
    save_checkpoint,
)

CONFIG_DIR = Path(__file__).parent / "configs"
SWEEP_AXES = {"K": "K", "lambda": "lam", "lam": "lam", "beta": "beta", "gamma": "gamma"}
BUNDLED_GAMES = {"rps": "rps.txt", "rock-paper-scissors": "rps.txt"}


class ConfigError(ValueError):
    """A config file is malformed or refers to something missing."""


# config files


def resolve_config_path(name) -> Path:
    """A filesystem path, or the name of a bundled config such as ``noisy-xor``."""
    path = Path(name)
    if path.exists():
        return path
    for candidate in (CONFIG_DIR / name, CONFIG_DIR / f"{name}.json"):
        if candidate.exists():
            return candidate
    raise ConfigError(f"config not found: {name}")


def load_config(name) -> dict:
    path = resolve_config_path(name)
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    cfg["_base"] = str(path.parent)
    return cfg


def _resolve_file(cfg: dict, name: str) -> Path:
    path = Path(name)
    if not path.is_absolute() and "_base" in cfg and not path.exists():
        path = Path(cfg["_base"]) / path
    if not path.exists():
        raise ConfigError(f"referenced file does not exist: {name}")
    return path


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def echo_config(out: Path, cfg: dict) -> None:
    write_json(out / "config.json", {k: v for k, v in cfg.items() if k != "_base"})


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def map_cells(fn: Callable, cells: list, threads: int = 1) -> list:
    """Run independent cells, in a process pool when ``threads > 1``.

    Results come back in cell order whatever the pool does.
    """
    if threads <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, cells))


# solve-game


def game_from_config(cfg: dict) -> MatrixGame:
    name = cfg.get("game")
    if name is None:
        raise ConfigError("solve-game needs a 'game' file")
    if name in BUNDLED_GAMES:
        return load_game(CONFIG_DIR / BUNDLED_GAMES[name])
    return load_game(_resolve_file(cfg, name))


def run_solve_game(cfg: dict, out: Path) -> dict:
    game = game_from_config(cfg)
    config = EmdConfig(eta=float(cfg.get("eta", 0.1)), iterations=int(cfg.get("T", 1000)),
                       simultaneous=bool(cfg.get("simultaneous", True)))
    mu, nu, trace = solve_zero_sum(game, config)
    write_csv(out / "exploitability.csv", ["iteration", "exploitability"],
              [[t + 1, v] for t, v in enumerate(trace)])
    result = {"row_strategy": mu.tolist(), "col_strategy": nu.tolist(),
              "exploitability": float(trace[-1]), "value": game.value(mu, nu),
              "eta": config.eta, "T": config.iterations}
    write_json(out / "strategies.json", result)
    checks = {}
    if "max_exploitability" in cfg.get("checks", {}):
        checks["max_exploitability"] = result["exploitability"] < cfg["checks"]["max_exploitability"]
    result["checks"] = checks
    return result


# sample


def run_sample(cfg: dict, seeds: list[int], out: Path) -> dict:
    target = get_target(cfg.get("target", "standard-normal"))
    base = SamplerConfig(**cfg.get("sampler", {}))
    steps = int(cfg.get("steps", 10000))
    chains = int(cfg.get("chains", 1))
    burn_in = float(cfg.get("burn_in", 0.2))
    ks_n = int(cfg.get("ks_n", 10000))
    rows, runs = [], []
    for seed in seeds:
        config = base.with_(seed=seed)
        traj = run_chains(target, config, steps, chains)
        cdf = target.cdf(config.epsilon)
        summary = diagnose(traj, cdf, burn_in=burn_in, ks_n=ks_n)
        if target.name == "standard-normal":
            summary["reference_variance"] = adjusted_normal_variance(config)
        if cdf is not None:
            summary["ks_pass"] = summary["ks_statistic"] < summary["ks_critical"]
        terminal = traj[-1]
        summary["terminal_mean"] = terminal.mean(axis=0).tolist()
        if np.all(np.isfinite(target.mode)):
            summary["max_terminal_distance_to_mode"] = float(
                np.max(np.linalg.norm(terminal - target.mode, axis=1)))
        summary["seed"] = seed
        runs.append(summary)
        # the thinned draws that entered the KS test
        start = int(np.floor(burn_in * steps))
        stride = summary.get("ks_stride", max(1, (steps - start) * chains // ks_n))
        kept = traj[start::stride]
        seed_rows = [[seed, start + i * stride, chain, *z.tolist()]
                     for i, step_draws in enumerate(kept) for chain, z in enumerate(step_draws)]
        rows.extend(seed_rows[:ks_n])
    header = ["seed", "step", "chain"] + [f"z{d}" for d in range(target.dim)]
    write_csv(out / "samples.csv", header, rows)
    result = {"target": target.name, "sampler": {**asdict(base), "seed": seeds}, "steps": steps,
              "chains": chains, "burn_in": burn_in, "runs": runs}
    checks = {}
    wanted = cfg.get("checks", {})
    if wanted.get("ks_pass"):
        checks["ks_pass"] = all(r.get("ks_pass", False) for r in runs)
    if "max_abs_mean" in wanted:
        checks["max_abs_mean"] = all(abs(r["mean"]) < wanted["max_abs_mean"] for r in runs)
    if "variance_ratio" in wanted:
        lo, hi = wanted["variance_ratio"]
        checks["variance_ratio"] = all(
            lo <= r["variance"] / r.get("reference_variance", 1.0) <= hi for r in runs)
    result["checks"] = checks
    write_json(out / "summary.json", result)
    return result


# train / ablate


def build_data(cfg: dict, seed: int) -> tuple[Batch, Batch, ModelSpec]:
    ds = dict(cfg.get("dataset", {}))
    model = dict(cfg.get("model", {}))
    if "synthetic" in ds:
        name = ds.pop("synthetic")
        data_seed = ds.pop("seed", seed)
        train, evals = make_synthetic(name, data_seed, **ds)
        vocab_size = synthetic_vocab_size(name, ds.get("n_filler", 8))
    elif "train" in ds:
        train, vocab = load_dataset(_resolve_file(cfg, ds["train"]), ds.get("format"),
                                    max_len=ds.get("max_len", 512))
        evals = train
        if "eval" in ds:
            evals, _ = load_dataset(_resolve_file(cfg, ds["eval"]), ds.get("format"), vocab=vocab,
                                    max_len=ds.get("max_len", 512))
        vocab_size = len(vocab) if vocab is not None else None
        if vocab_size is None:
            model["embed_dim"] = train.features.shape[1]
    else:
        raise ConfigError("dataset needs 'synthetic' or 'train'")
    if train.task == "regression":
        model.setdefault("output_dim", 1)
    else:
        model.setdefault("output_dim", train.n_classes)
    model.setdefault("task", train.task)
    model.setdefault("embed_dim", 8)
    spec = ModelSpec.from_dict({"vocab_size": vocab_size, **model})
    return train, evals, spec


def train_config_for(cfg: dict, mode: str, seed: int, overrides: dict | None = None) -> TrainConfig:
    try:
        base = TrainConfig.from_dict({**cfg.get("train", {}), **(overrides or {}), "seed": seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train section: {exc}") from None
    budget = cfg.get("budget")
    if budget is not None:
        per_step = grad_evals_per_step(mode, base)
        if not isinstance(budget, int) or budget < per_step:
            raise ConfigError(f"budget must be an integer of at least {per_step} for {mode}")
        if budget % per_step:
            raise ConfigError(f"budget {budget} is not a multiple of {per_step} evaluations per {mode} step")
        base = base.replace(T=budget // per_step)
    return base


def run_cell(cell: dict) -> dict:
    """Train one (mode, seed[, sweep value]) cell and write its metrics file."""
    cfg, mode, seed, out = cell["cfg"], cell["mode"], cell["seed"], Path(cell["out"])
    tag = cell["tag"]
    row = {"mode": mode, "seed": seed, "status": "ok", "error": ""}
    try:
        config = train_config_for(cfg, mode, seed, cell.get("overrides"))
        train, evals, spec = build_data(cfg, seed)
        theta, metrics = TRAINERS[mode](spec, train, config, evals)
    except (TrainingDiverged, ValueError, KeyError) as exc:
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        return row
    metrics.write_jsonl(out / "runs" / f"{tag}.jsonl")
    if cfg.get("checkpoints", True):
        save_checkpoint(out / "checkpoints" / f"{tag}.ckpt", theta,
                        {"mode": mode, "seed": seed, "config": config.to_dict()})
    final = metrics.final
    row.update(T=config.T, grad_evals=metrics.grad_evals, final_loss=final["loss"],
               final_eval=final["eval"], adv_risk=final["adv_risk"],
               max_delta_norm=metrics.max_delta_norm)
    return row


SUMMARY_COLUMNS = ["mode", "seed", "status", "T", "grad_evals", "final_loss", "final_eval",
                   "adv_risk", "max_delta_norm", "error"]


def _prepare_out(out: Path):
    (out / "runs").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)


def run_train(cfg: dict, seeds: list[int], out: Path, threads: int = 1) -> dict:
    modes = cfg.get("modes", ["vanilla", "pgd", "mat"])
    for m in modes:
        if m not in TRAINERS:
            raise ConfigError(f"unknown mode {m!r}; choose from {sorted(TRAINERS)}")
    for mode in modes:
        train_config_for(cfg, mode, seeds[0])  # validate before running anything
    _prepare_out(out)
    cells = [{"cfg": cfg, "mode": m, "seed": s, "out": str(out), "tag": f"{m}_seed{s}"}
             for s in seeds for m in modes]
    rows = map_cells(run_cell, cells, threads)
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, [[r.get(c) for c in SUMMARY_COLUMNS] for r in rows])
    checks = evaluate_train_checks(cfg.get("checks", {}), rows)
    result = {"rows": rows, "checks": checks, "medians": _medians(rows),
              "failed": [r for r in rows if r["status"] != "ok"]}
    write_json(out / "checks.json", {"checks": checks, "medians": result["medians"]})
    return result


def _medians(rows: list[dict]) -> dict:
    out = {}
    for mode in sorted({r["mode"] for r in rows}):
        ok = [r for r in rows if r["mode"] == mode and r["status"] == "ok"]
        if ok:
            out[mode] = {
                "final_eval": float(np.median([r["final_eval"] for r in ok])),
                "adv_risk": float(np.median([r["adv_risk"] for r in ok])),
            }
    return out


def evaluate_train_checks(wanted: dict, rows: list[dict]) -> dict:
    checks = {}
    med = _medians(rows)
    if wanted.get("mat_risk_le_vanilla"):
        checks["mat_risk_le_vanilla"] = (
            "mat" in med and "vanilla" in med and med["mat"]["adv_risk"] <= med["vanilla"]["adv_risk"])
    if "min_eval" in wanted:
        thr = wanted["min_eval"]
        checks["min_eval"] = all(r["status"] == "ok" and r["final_eval"] >= thr for r in rows)
    if wanted.get("equal_budget"):
        budgets = {r.get("grad_evals") for r in rows if r["status"] == "ok"}
        checks["equal_budget"] = len(budgets) == 1
    return checks


def sweep_axis(cfg: dict) -> tuple[str, list]:
    sweep = cfg.get("sweep")
    if not isinstance(sweep, dict) or len(sweep) != 1:
        raise ConfigError("sweep must name exactly one axis (one of K, lambda, beta, gamma)")
    (axis, values), = sweep.items()
    if axis not in SWEEP_AXES:
        raise ConfigError(f"cannot sweep {axis!r}; choose one of K, lambda, beta, gamma")
    if not isinstance(values, list) or not values:
        raise ConfigError(f"sweep grid for {axis!r} is empty")
    return axis, values


ABLATION_COLUMNS = ["axis", "value", "seed", "status", "final_eval", "adv_risk", "final_loss",
                    "grad_evals", "error"]


def run_ablate(cfg: dict, seeds: list[int], out: Path, threads: int = 1) -> dict:
    axis, values = sweep_axis(cfg)
    field_name = SWEEP_AXES[axis]
    mode = cfg.get("mode", "mat")
    for v in values:
        train_config_for(cfg, mode, seeds[0], {field_name: v})
    _prepare_out(out)
    cells = [{"cfg": cfg, "mode": mode, "seed": s, "out": str(out), "overrides": {field_name: v},
              "tag": f"{axis}={v}_seed{s}", "value": v}
             for v in values for s in seeds]
    rows = map_cells(run_cell, cells, threads)
    for c, r in zip(cells, rows):
        r["label"] = f"{axis}={c['value']}"
    table = [[axis, c["value"], c["seed"], r["status"], r.get("final_eval"), r.get("adv_risk"),
              r.get("final_loss"), r.get("grad_evals"), r["error"]] for c, r in zip(cells, rows)]
    write_csv(out / "ablation.csv", ABLATION_COLUMNS, table)
    return {"axis": axis, "values": values, "rows": rows,
            "failed": [r for r in rows if r["status"] != "ok"], "checks": {}}


# gradcheck


def _gradcheck_setup(cfg: dict, rng: np.random.Generator):
    model = {"embed_dim": 2, "hidden": [3], "activation": "tanh", **cfg.get("model", {})}
    vocab = int(cfg.get("vocab_size", 5))
    batch_size, seq_len = int(cfg.get("batch_size", 3)), int(cfg.get("seq_len", 3))
    ids = rng.integers(0, vocab, size=(batch_size, seq_len))
    cls_spec = ModelSpec.from_dict({"vocab_size": vocab, **model, "output_dim": 2, "task": "classification"})
    reg_spec = ModelSpec.from_dict({"vocab_size": vocab, **model, "output_dim": 1, "task": "regression"})
    cls_batch = Batch(targets=rng.integers(0, 2, size=batch_size), task="classification", ids=ids, n_classes=2)
    reg_batch = Batch(targets=rng.normal(size=batch_size), task="regression", ids=ids)
    return cls_spec, reg_spec, cls_batch, reg_batch


def gradcheck_objectives(cfg: dict, rng: np.random.Generator) -> dict[str, Callable]:
    """Each entry draws a random point and returns ``(value_and_grad, point)``."""
    cls_spec, reg_spec, cls_batch, reg_batch = _gradcheck_setup(cfg, rng)
    lam = float(cfg.get("lam", 1.0))
    k = int(cfg.get("K", 3))

    def theta_of(spec):
        return ParameterVector.init(spec, int(rng.integers(2 ** 31)), scale=1.0)

    def delta_of(spec, batch):
        return 0.5 * rng.standard_normal((len(batch), batch.seq_len, spec.embed_dim))

    def wrt_theta(spec, batch, deltas, lam_, mode="ema-mean"):
        theta = theta_of(spec)
        return (lambda v: estimate_h_mu(theta.replace(v), batch, deltas, lam_, mode)[:2]), theta.values

    def wrt_delta(spec, batch, thetas, lam_, mode="ema-mean"):
        delta = delta_of(spec, batch)
        return (lambda d: estimate_h_nu(thetas, d, batch, lam_, mode)), delta

    def sym_kl_logits():
        logits = rng.normal(size=(4, 3))
        other = rng.normal(size=(4, 3))

        def f(z):
            from .losses import sym_kl
            tape = ad.Tape()
            node = tape.input("z", z)
            out = sym_kl(ad.softmax(node), ad.softmax(tape.const(other)))
            return float(out.value), tape.backward(["z"], output=out)["z"]
        return f, logits

    def cross_entropy_logits():
        labels = rng.integers(0, 3, size=4)

        def f(z):
            tape = ad.Tape()
            node = tape.input("z", z)
            out = task_loss(node, labels)
            return float(out.value), tape.backward(["z"], output=out)["z"]
        return f, rng.normal(size=(4, 3))

    def game_value():
        a = rng.normal(size=(3, 4))

        def f(z):
            tape = ad.Tape()
            mu, nu = tape.input("mu", z[:3].reshape(1, 3)), tape.input("nu", z[3:].reshape(4, 1))
            out = ad.sum(mu @ tape.const(a) @ nu)
            g = tape.backward(["mu", "nu"], output=out)
            return float(out.value), np.concatenate([g["mu"].ravel(), g["nu"].ravel()])
        return f, np.concatenate([rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(4))])

    return {
        "cross-entropy/logits": cross_entropy_logits,
        "sym-kl/logits": sym_kl_logits,
        "task-loss/classification": lambda: wrt_theta(cls_spec, cls_batch, None, 0.0),
        "task-loss/regression": lambda: wrt_theta(reg_spec, reg_batch, None, 0.0),
        "objective/theta/classification": lambda: wrt_theta(
            cls_spec, cls_batch, delta_of(cls_spec, cls_batch), lam),
        "objective/theta/regression": lambda: wrt_theta(
            reg_spec, reg_batch, delta_of(reg_spec, reg_batch), lam),
        "objective/delta/classification": lambda: wrt_delta(cls_spec, cls_batch, theta_of(cls_spec), lam),
        "objective/delta/regression": lambda: wrt_delta(reg_spec, reg_batch, theta_of(reg_spec), lam),
        "h-mu/per-sample": lambda: wrt_theta(
            cls_spec, cls_batch, [delta_of(cls_spec, cls_batch) for _ in range(k)], lam, "per-sample"),
        "h-nu/per-sample": lambda: wrt_delta(
            cls_spec, cls_batch, [theta_of(cls_spec) for _ in range(k)], lam, "per-sample"),
        "game/bilinear-value": game_value,
    }


def run_gradcheck(cfg: dict, seed: int, points: int = 100, inject_fault: bool = False) -> dict:
    """Worst relative autodiff-vs-finite-difference error per objective.

    ``inject_fault`` corrupts one gradient coordinate by 1e-3 so the
    threshold logic can be exercised.
    """
    rng = np.random.default_rng(seed)
    objectives = gradcheck_objectives(cfg, rng)
    step = float(cfg.get("step", 1e-5))
    report = {}
    for name, make in objectives.items():
        worst = 0.0
        for _ in range(points):
            fn, point = make()
            if inject_fault:
                fn = _corrupt(fn)
            worst = max(worst, ad.check_gradient(fn, point, step))
        report[name] = worst
    return report


def _corrupt(fn):
    def wrapped(z):
        value, grad = fn(z)
        grad = np.array(grad, dtype=np.float64)
        grad.reshape(-1)[0] += 1e-3
        return value, grad
    return wrapped
