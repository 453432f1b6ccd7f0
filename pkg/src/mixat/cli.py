"""Command-line front end.

    mixat solve-game --game rps --T 5000 --eta 0.1 --out runs/rps
    mixat sample --target standard-normal --gamma 0.01 --epsilon 1 --out runs/sgld
    mixat train --config noisy-xor --out runs/noisy --seeds 0,1,2,3,4
    mixat ablate --config ablate-K --out runs/ablate-K
    mixat gradcheck

``--config`` takes a JSON file or the name of a bundled config. Flags
given on the command line override the config. Each command echoes the
effective config into ``--out`` and exits nonzero if any run failed or any
check listed under ``"checks"`` in the config did not pass.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from . import harness
from .game import GameFormatError


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON config file or bundled config name")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--seeds", type=_seeds, default=None, help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--threads", type=int, default=1, help="worker processes for independent cells")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixat", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    p = sub.add_parser("solve-game", parents=[common], help="entropic mirror descent on a matrix game")
    p.add_argument("game", nargs="?", help="game file (or 'rps')")
    p.add_argument("--game", dest="game_opt", help="same as the positional argument")
    p.add_argument("--eta", type=float)
    p.add_argument("--T", type=int)
    p.add_argument("--sequential", action="store_true", help="alternate the two players' updates")

    p = sub.add_parser("sample", parents=[common], help="Langevin sampling from a built-in target")
    p.add_argument("--target")
    p.add_argument("--kind", choices=("sgld", "rmsprop-sgld", "adam-sgld"))
    p.add_argument("--gamma", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--burn-in", type=float)

    sub.add_parser("train", parents=[common], help="run every (seed, mode) training cell")
    sub.add_parser("ablate", parents=[common], help="one-axis MAT sweep over K, lambda, beta or gamma")

    p = sub.add_parser("gradcheck", parents=[common], help="autodiff versus finite differences")
    p.add_argument("--points", type=int, default=100, help="random points per objective")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    return parser


def _load(args) -> dict:
    return harness.load_config(args.config) if args.config else {}


def _seed_list(args, cfg: dict) -> list[int]:
    if args.seeds is not None:
        return args.seeds
    return [int(s) for s in cfg.get("seeds", [0])]


def _out(args, command: str) -> Path:
    out = args.out if args.out is not None else Path("runs") / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report_checks(checks: dict) -> bool:
    for name, ok in checks.items():
        print(f"check {name}: {'PASS' if ok else 'FAIL'}")
    return all(checks.values())


def cmd_solve_game(args) -> int:
    cfg = _load(args)
    game = args.game_opt or args.game
    for key, value in (("game", game), ("eta", args.eta), ("T", args.T)):
        if value is not None:
            cfg[key] = value
    if args.sequential:
        cfg["simultaneous"] = False
    cfg.setdefault("eta", 0.1)
    cfg.setdefault("T", 1000)
    out = _out(args, "solve-game")
    try:
        result = harness.run_solve_game(cfg, out)
    except (GameFormatError, harness.ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    harness.echo_config(out, cfg)
    print(f"exploitability after T={result['T']}: {result['exploitability']:.3e}")
    print("row:", " ".join(f"{p:.4f}" for p in result["row_strategy"]))
    print("col:", " ".join(f"{p:.4f}" for p in result["col_strategy"]))
    return 0 if _report_checks(result["checks"]) else 1


def cmd_sample(args) -> int:
    cfg = _load(args)
    sampler = dict(cfg.get("sampler", {}))
    for key, value in (("kind", args.kind), ("gamma", args.gamma), ("epsilon", args.epsilon)):
        if value is not None:
            sampler[key] = value
    cfg["sampler"] = sampler
    for key, value in (("target", args.target), ("steps", args.steps), ("chains", args.chains),
                       ("burn_in", args.burn_in)):
        if value is not None:
            cfg[key] = value
    seeds = _seed_list(args, cfg)
    cfg["seeds"] = seeds
    out = _out(args, "sample")
    try:
        result = harness.run_sample(cfg, seeds, out)
    except (KeyError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    harness.echo_config(out, cfg)
    for r in result["runs"]:
        line = f"seed {r['seed']}: mean {r['mean']:+.4f} variance {r['variance']:.4f}"
        if "ks_statistic" in r:
            line += f" KS {r['ks_statistic']:.4f} (critical {r['ks_critical']:.4f})"
        print(line)
    return 0 if _report_checks(result["checks"]) else 1


def _train_like(args, runner, command: str) -> int:
    cfg = _load(args)
    if not cfg:
        print("error: --config is required", file=sys.stderr)
        return 2
    seeds = _seed_list(args, cfg)
    cfg["seeds"] = seeds
    out = _out(args, command)
    start = time.perf_counter()
    try:
        result = runner(cfg, seeds, out, args.threads)
    except harness.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    harness.echo_config(out, cfg)
    for r in result["rows"]:
        if r["status"] == "ok":
            print(f"{r.get('label', r['mode']):8s} seed {r['seed']}: eval {r['final_eval']:.4f} "
                  f"adv_risk {r['adv_risk']:.4f} grad_evals {r['grad_evals']}")
        else:
            print(f"{r.get('label', r['mode']):8s} seed {r['seed']}: FAILED {r['error']}")
    print(f"{len(result['rows'])} runs in {time.perf_counter() - start:.1f}s")
    ok = _report_checks(result["checks"])
    return 0 if ok and not result["failed"] else 1


def cmd_train(args) -> int:
    return _train_like(args, harness.run_train, "train")


def cmd_ablate(args) -> int:
    return _train_like(args, harness.run_ablate, "ablate")


def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    seed = _seed_list(args, cfg)[0]
    report = harness.run_gradcheck(cfg, seed, points=args.points, inject_fault=args.inject_fault)
    for name, err in report.items():
        print(f"{name:34s} {err:.3e}")
    worst = max(report.values())
    print(f"worst relative error: {worst:.3e} (tolerance {args.tolerance:.0e})")
    if args.out is not None:
        out = _out(args, "gradcheck")
        harness.write_csv(out / "gradcheck.csv", ["objective", "worst_relative_error"],
                          [[k, v] for k, v in report.items()])
        harness.echo_config(out, {**cfg, "seed": seed, "points": args.points})
    return 0 if worst <= args.tolerance else 1


COMMANDS = {"solve-game": cmd_solve_game, "sample": cmd_sample, "train": cmd_train,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except harness.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
