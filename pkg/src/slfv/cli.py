"""Command-line entry point: ``slfv run | replay | check``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import STOCHASTIC_KINDS, ExperimentConfig, parse_config
from .errors import ConfigError, ReplayError
from .experiments import build_grid, replay, run_experiment
from .lattice import read_snapshot, write_snapshot


def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError([(item, "overrides look like section.key=value")])
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load(path: str, pairs: list[str] | None = None) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), _overrides(pairs))


def _report(exc: ConfigError) -> None:
    for key, reason in exc.problems:
        print(f"error: {key}: {reason}", file=sys.stderr)


def cmd_check(args) -> int:
    cfg = _load(args.config, args.set)
    print(f"ok {cfg.kind} {cfg.digest}")
    return 0


def cmd_run(args) -> int:
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["experiment.seed"] = str(args.seed)
    if args.threads is not None:
        overrides["experiment.threads"] = str(args.threads)
    cfg = parse_config(Path(args.config).read_text(), overrides)
    if cfg.kind in STOCHASTIC_KINDS and args.seed is None:
        raise ConfigError([("--seed", f"{cfg.kind} runs are stochastic; pass --seed")])
    manifest = run_experiment(cfg, seed=args.seed, out=args.out)
    print(f"{manifest.status} {manifest.directory}")
    for a in manifest.artifacts:
        print(f"  {a['path']} {a['sha256'][:16]}")
    for w in manifest.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_replay(args) -> int:
    log = Path(args.log)
    cfg_path = Path(args.config) if args.config else log.parent / "config.ini"
    cfg = _load(str(cfg_path))
    _, final = replay(log, cfg)
    out = log.parent / "replay_final.bin"
    write_snapshot(out, build_grid(cfg), final)
    ref = log.parent / "final.bin"
    if ref.exists():
        _, expected = read_snapshot(ref)
        same = expected.shape == final.shape and np.array_equal(expected.view(np.uint64), final.view(np.uint64))
        print("bitwise identical" if same else "MISMATCH")
        return 0 if same else 1
    print(f"replayed {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slfv", description="Spatial Lambda-Fleming-Viot simulations and diagnostics.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment described by an INI file")
    r.add_argument("config")
    r.add_argument("--seed", type=int, help="root seed (required for stochastic kinds)")
    r.add_argument("--out", help="output directory (overrides $SLFV_OUTPUT_DIR and the config)")
    r.add_argument("--threads", type=int, help="worker processes for replicate ensembles")
    r.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check", help="validate a config without running it")
    c.add_argument("config")
    c.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    c.set_defaults(func=cmd_check)

    y = sub.add_parser("replay", help="re-apply a logged trajectory and compare final fields")
    y.add_argument("log")
    y.add_argument("--config", help="config of the logged run (default: config.ini next to the log)")
    y.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _report(exc)
        return 2
    except ReplayError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
