"""Command line front end: ``lqhmc run|list-presets|validate-config|dump-matrix``.

Exit codes: 0 success, 1 numerical failure, 2 invalid configuration or
usage, 3 failed checks under ``--strict``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, FlowDivergenceError, LqhmcError, SizeGuardError
from .experiment import SEED_ENV, apply_overrides, build, catalog, load_config, preset_config, run_experiment
from .transfer_op import assemble_matrix


def _resolve_config(args):
    if args.preset and args.config:
        raise ConfigError("give either a config file or --preset, not both")
    if args.preset:
        cfg = preset_config(args.preset)
    elif args.config:
        cfg = load_config(args.config)
    else:
        raise ConfigError("a config file or --preset is required")
    seed = args.seed
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    overrides = {
        "seed": seed,
        "iterations": getattr(args, "iterations", None),
        "particles": getattr(args, "particles", None),
        "grid.points": getattr(args, "points", None),
        "flow.time": getattr(args, "time", None),
        "exponents": getattr(args, "q", None),
    }
    if any(v is not None for v in overrides.values()):
        cfg = apply_overrides(cfg, **overrides)
    return cfg


def _add_source(p):
    p.add_argument("config", nargs="?", help="YAML experiment config")
    p.add_argument("--preset", help="use a built-in preset instead of a config file")
    p.add_argument("--seed", type=int, help=f"root seed (default: ${SEED_ENV}, then the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lqhmc", description="HMC density evolution experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment and write its artifacts")
    _add_source(p)
    p.add_argument("-o", "--out", help="output directory (default: config 'output' or ./lqhmc-run)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--particles", type=int)
    p.add_argument("--points", type=int, help="grid points per axis")
    p.add_argument("--time", help="flow time; accepts pi multiples such as pi/2")
    p.add_argument("--q", type=float, action="append", help="exponent (repeatable)")
    p.add_argument("--strict", action="store_true", help="exit 3 when any check fails")
    p.add_argument("--quiet", action="store_true")

    sub.add_parser("list-presets", help="print registered targets, momenta, flows and presets")

    p = sub.add_parser("validate-config", help="check a config without running it")
    _add_source(p)

    p = sub.add_parser("dump-matrix", help="assemble the operator matrix and write it as text")
    _add_source(p)
    p.add_argument("-o", "--out", required=True, help="matrix file to write")
    p.add_argument("--points", type=int, help="grid points per axis")
    p.add_argument("--adjoint", action="store_true", help="dump T^dagger instead of T")
    return parser


def _cmd_run(args):
    cfg = _resolve_config(args)
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    try:
        res = run_experiment(cfg, args.out, log=log)
    except (FlowDivergenceError, SizeGuardError, FloatingPointError) as exc:
        out = Path(args.out or cfg.output or "lqhmc-run")
        out.mkdir(parents=True, exist_ok=True)
        dump = {"error": type(exc).__name__, "message": str(exc), "config": cfg.to_dict()}
        (out / "failure.json").write_text(json.dumps(dump, indent=2, sort_keys=True, default=repr) + "\n")
        raise
    n_fail = sum(c.status == "fail" for c in res.checks)
    print(f"wrote {', '.join(res.files)} to {res.out_dir} "
          f"(gap {res.spectral.gap:.6g}, {n_fail} failed checks, {len(res.warnings)} warnings)")
    return 3 if args.strict and n_fail else 0


def _cmd_list(_args):
    cat = catalog()
    for section in ("targets", "momenta", "flows", "presets"):
        print(f"{section}:")
        for name, desc in cat[section].items():
            print(f"  {name:<28} {desc}")
    print("initial densities: " + ", ".join(cat["initial"]))
    return 0


def _cmd_validate(args):
    cfg = _resolve_config(args)
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    for w in cfg.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def _cmd_dump(args):
    cfg = _resolve_config(args)
    op = build(cfg).op
    mat = assemble_matrix(op.adjoint if args.adjoint else op)
    mat.write(args.out)
    print(f"wrote {mat.matrix.shape[0]}x{mat.matrix.shape[1]} matrix to {args.out}")
    return 0


COMMANDS = {"run": _cmd_run, "list-presets": _cmd_list, "validate-config": _cmd_validate, "dump-matrix": _cmd_dump}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FlowDivergenceError, SizeGuardError, FloatingPointError, LqhmcError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
