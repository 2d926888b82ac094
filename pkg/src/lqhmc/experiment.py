"""Experiment configuration, presets and the reproducible run pipeline.

A config is a small YAML mapping::

    target:   {name: gaussian, dim: 1}
    momentum: {name: normal}
    flow:     {kind: exact-rotation, time: 1.0}
    grid:     {half_width: 8.0, points: 512}
    initial:  {name: uniform, low: -1.0, high: 1.0}
    exponents: [1.5, 2, 3, 4]
    iterations: 200
    particles: 0
    seed: 0

Times may be written as multiples of ``pi`` (``pi/2``, ``2*pi``). A run
writes ``trace.csv``, ``checks.csv``, ``spectral.json``, optionally
``sampler.csv``, and ``manifest.json``. No output carries a timestamp, so a
rerun with the same config and seed reproduces every file byte for byte.
"""
from __future__ import annotations

import copy
import csv
import json
import math
import platform
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .densities import MOMENTA, TARGETS, make_momentum, make_target
from .diagnostics import estimate_spectral_gap, iterate_and_trace, property_checks
from .errors import ConfigError
from .lq_space import Grid, GridDensity, as_exponents, box_indicator
from .phase_flow import ExactGaussianRotation, HamiltonianEnergy, Leapfrog, make_flow
from .sampler import METROPOLIS, ChainConfig, compare_to_operator, grid_sampler, initial_ensemble, run_chain
from .transfer_op import TransferOperator

SEED_ENV = "LQHMC_SEED"
RESONANCE_TOL = 1e-9


# --------------------------------------------------------------------------
# initial densities, as functions of grid nodes (N, d)


def _uniform(x, low=-1.0, high=1.0):
    return np.all((x >= low) & (x <= high), axis=-1).astype(float)


def _bump(x, center=0.5, width=0.7):
    c = np.broadcast_to(np.asarray(center, dtype=float), (x.shape[1],))
    return np.exp(-np.sum((x - c) ** 2, axis=-1) / (2.0 * width ** 2))


def _two_bumps(x, left=-2.0, right=1.0, width=0.5, ratio=0.3):
    return ratio * _bump(x, left, width) + (1.0 - ratio) * _bump(x, right, width)


def _triangle(x, center=0.0, half_base=2.0):
    return np.prod(np.clip(1.0 - np.abs(x - center) / half_base, 0.0, None), axis=-1)


INITIAL_DENSITIES = {
    "uniform": _uniform,
    "bump": _bump,
    "two-bumps": _two_bumps,
    "triangle": _triangle,
}


def initial_density(grid: Grid, spec: dict, target=None) -> GridDensity:
    spec = dict(spec)
    name = spec.pop("name")
    if name == "target":
        return GridDensity.of_target(grid, target)
    if name == "uniform":
        return box_indicator(grid, **spec)
    return GridDensity.from_function(grid, lambda x: INITIAL_DENSITIES[name](x, **spec))


# --------------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    target: dict
    momentum: dict
    flow: dict
    grid: dict
    initial: dict = field(default_factory=lambda: {"name": "uniform", "low": -1.0, "high": 1.0})
    exponents: list = field(default_factory=lambda: [1.5, 2.0, 3.0, 4.0])
    iterations: int = 200
    particles: int = 0
    sampler_steps: int = 10
    seed: int = 0
    momentum_nodes: int | None = None
    checks: bool = True
    output: str | None = None
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {k: copy.deepcopy(getattr(self, k)) for k in _FIELDS}
        return d


_FIELDS = ("target", "momentum", "flow", "grid", "initial", "exponents", "iterations", "particles",
           "sampler_steps", "seed", "momentum_nodes", "checks", "output")
_REQUIRED = ("target", "momentum", "flow", "grid")

_PI_RE = re.compile(r"^\s*(?P<num>[0-9.]*)\s*\*?\s*pi\s*(?:/\s*(?P<den>[0-9.]+))?\s*$")


def parse_time(value) -> float:
    """Number, or a string such as ``pi``, ``pi/2``, ``2*pi``, ``0.5pi``."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    m = _PI_RE.match(str(value))
    if not m:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ValueError(f"cannot read time {value!r}") from None
    num = float(m.group("num")) if m.group("num") else 1.0
    den = float(m.group("den")) if m.group("den") else 1.0
    return num * math.pi / den


def _line_index(node, prefix=(), out=None):
    """Map dotted key paths of a composed YAML node to 1-based line numbers."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (k.value,)
            out[".".join(path)] = k.start_mark.line + 1
            _line_index(v, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            out[".".join(prefix + (str(i),))] = v.start_mark.line + 1
            _line_index(v, prefix + (str(i),), out)
    return out


def load_config_text(text: str, source="<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise ConfigError(f"YAML syntax: {exc.problem}", line, source) from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping", 1, source)
    return validate_config(data, _line_index(node), source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return load_config_text(path.read_text(), str(path))


def _resonant(kind, time):
    return kind == ExactGaussianRotation.kind and abs(math.remainder(time, math.pi)) < RESONANCE_TOL


def validate_config(data: dict, lines=None, source="<config>") -> ExperimentConfig:
    """Check a raw mapping against the registries; errors name the offending line."""
    lines = lines or {}

    def fail(key, msg):
        line = None
        parts = key.split(".")
        while parts and line is None:
            line = lines.get(".".join(parts))
            parts.pop()
        raise ConfigError(msg, line, source)

    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        fail(unknown[0], f"unknown key {unknown[0]!r}")
    for key in _REQUIRED:
        if key not in data:
            raise ConfigError(f"missing required key {key!r}", None, source)
    d = copy.deepcopy(data)

    for key, registry in (("target", TARGETS), ("momentum", MOMENTA)):
        if not isinstance(d[key], dict) or "name" not in d[key]:
            fail(key, f"{key} needs a mapping with a 'name'")
        if d[key]["name"] not in registry:
            fail(f"{key}.name", f"unknown {key} {d[key]['name']!r}; choose from {sorted(registry)}")
    try:
        target = make_target(**d["target"])
    except (TypeError, ValueError) as exc:
        fail("target", f"bad target parameters: {exc}")
    try:
        momentum = make_momentum(**{"dim": target.dim, **d["momentum"]})
    except (TypeError, ValueError) as exc:
        fail("momentum", f"bad momentum parameters: {exc}")

    flow = d["flow"]
    if not isinstance(flow, dict) or "kind" not in flow or "time" not in flow:
        fail("flow", "flow needs 'kind' and 'time'")
    if flow["kind"] not in (ExactGaussianRotation.kind, Leapfrog.kind):
        fail("flow.kind", f"unknown flow kind {flow['kind']!r}")
    try:
        flow["time"] = parse_time(flow["time"])
    except ValueError as exc:
        fail("flow.time", str(exc))
    if not flow["time"] > 0:
        fail("flow.time", "flow time must be positive")
    if flow["kind"] == Leapfrog.kind:
        if not isinstance(flow.get("steps"), int) or flow["steps"] < 1:
            fail("flow", "leapfrog needs a positive integer 'steps'")
    elif target.name != "gaussian" or momentum.name != "normal":
        fail("flow.kind", "the exact-rotation flow needs the gaussian target and normal momentum")

    grid = d["grid"]
    if not isinstance(grid, dict):
        fail("grid", "grid needs a mapping")
    grid.setdefault("half_width", target.half_width)
    grid.setdefault("points", 512 if target.dim == 1 else 64)
    try:
        Grid(target.dim, float(grid["half_width"]), int(grid["points"]))
    except ValueError as exc:
        sub = next((k for k in ("points", "half_width") if k.replace("_", "") in str(exc).replace("_", "")), "")
        fail(f"grid.{sub}" if sub else "grid", str(exc))

    exps = d.get("exponents", [1.5, 2.0, 3.0, 4.0])
    if not isinstance(exps, list) or not exps:
        fail("exponents", "exponents must be a non-empty list")
    for i, q in enumerate(exps):
        try:
            as_exponents(float(q))
        except (TypeError, ValueError):
            fail(f"exponents.{i}", f"exponent {q!r} is invalid: every exponent must satisfy q > 1")
    d["exponents"] = [float(q) for q in exps]

    initial = d.get("initial", {"name": "uniform", "low": -1.0, "high": 1.0})
    if not isinstance(initial, dict) or initial.get("name") not in (*INITIAL_DENSITIES, "target"):
        fail("initial", f"initial needs a 'name' from {sorted(INITIAL_DENSITIES) + ['target']}")

    for key, lo in (("iterations", 0), ("particles", 0), ("sampler_steps", 0), ("seed", 0)):
        if key in d and (not isinstance(d[key], int) or isinstance(d[key], bool) or d[key] < lo):
            fail(key, f"{key} must be an integer >= {lo}")
    if d.get("momentum_nodes") is not None and (not isinstance(d["momentum_nodes"], int) or d["momentum_nodes"] < 2):
        fail("momentum_nodes", "momentum_nodes must be an integer >= 2")

    cfg = ExperimentConfig(**d)
    if _resonant(flow["kind"], flow["time"]):
        cfg.warnings.append(f"resonant time t={flow['time']:.6g}: the rotation is a reflection or the identity, "
                            "coverage fails and no strict contraction is expected")
    return cfg


def apply_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Return a revalidated copy with top-level or dotted keys replaced."""
    d = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return validate_config(d, source="<overrides>")


# --------------------------------------------------------------------------
# presets


def _gauss(time, **extra):
    base = {
        "target": {"name": "gaussian", "dim": 1},
        "momentum": {"name": "normal"},
        "flow": {"kind": "exact-rotation", "time": time},
        "grid": {"half_width": 8.0, "points": 512},
    }
    base.update(extra)
    return base


PRESETS = {
    "gaussian-quarter-turn": (
        "exact rotation by pi/2: one step maps any density onto the fixed ray",
        _gauss("pi/2", iterations=20, particles=100000, sampler_steps=3)),
    "gaussian-mixing": (
        "exact rotation by t=1: geometric convergence at rate cos(1)",
        _gauss(1.0, particles=100000)),
    "gaussian-resonant": (
        "exact rotation by pi: a reflection, the equality case of the contraction",
        _gauss("pi", initial={"name": "bump", "center": 0.5, "width": 0.7}, iterations=50)),
    "gaussian-2d": (
        "two-dimensional exact rotation by t=1 on a 64 x 64 grid",
        {
            "target": {"name": "gaussian", "dim": 2},
            "momentum": {"name": "normal"},
            "flow": {"kind": "exact-rotation", "time": 1.0},
            "grid": {"half_width": 8.0, "points": 64},
            "initial": {"name": "bump", "center": [0.5, -0.3], "width": 0.8},
            "exponents": [1.5, 2.0, 4.0],
            "iterations": 100,
        }),
    "double-well-leapfrog": (
        "leapfrog on exp(-(q^2-1)^2); reports the fixed-point and energy defects",
        {
            "target": {"name": "double-well"},
            "momentum": {"name": "normal"},
            "flow": {"kind": "leapfrog", "time": 1.0, "steps": 20},
            "grid": {"half_width": 3.0, "points": 256},
            "initial": {"name": "uniform", "low": -0.5, "high": 1.5},
            "iterations": 100,
            "particles": 100000,
        }),
    "mixture-leapfrog": (
        "leapfrog on an asymmetric two-component Gaussian mixture",
        {
            "target": {"name": "gaussian-mixture"},
            "momentum": {"name": "normal"},
            "flow": {"kind": "leapfrog", "time": 1.5, "steps": 30},
            "grid": {"half_width": 10.0, "points": 256},
            "initial": {"name": "bump", "center": 0.0, "width": 1.0},
            "iterations": 100,
        }),
    "skew-momentum-leapfrog": (
        "skew-normal (non-even) momentum: self-adjoint checks run on S = T* T",
        {
            "target": {"name": "gaussian", "dim": 1},
            "momentum": {"name": "skew-normal", "shape": 4.0},
            "flow": {"kind": "leapfrog", "time": 1.0, "steps": 20},
            "grid": {"half_width": 8.0, "points": 256},
            "momentum_nodes": 1601,
            "iterations": 100,
        }),
    "student-momentum-leapfrog": (
        "heavy-tailed even momentum (Student t, nu=7) on the Gaussian target",
        {
            "target": {"name": "gaussian", "dim": 1},
            "momentum": {"name": "student", "nu": 7.0},
            "flow": {"kind": "leapfrog", "time": 1.0, "steps": 20},
            "grid": {"half_width": 8.0, "points": 256},
            "iterations": 100,
        }),
}


def preset_config(name) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; see list-presets")
    return validate_config(copy.deepcopy(PRESETS[name][1]), source=f"preset:{name}")


def catalog() -> dict:
    """Registered targets, momenta, flows, initial densities and presets."""
    return {
        "targets": {k: v.__doc__.strip().splitlines()[0] if v.__doc__ else "" for k, v in TARGETS.items()},
        "momenta": {k: f"{v.__name__}{' (not even)' if k == 'skew-normal' else ''}" for k, v in MOMENTA.items()},
        "flows": {ExactGaussianRotation.kind: "closed-form rotation (gaussian target, normal momentum)",
                  Leapfrog.kind: "Stormer-Verlet, any smooth pair; needs steps"},
        "initial": sorted([*INITIAL_DENSITIES, "target"]),
        "presets": {k: v[0] for k, v in PRESETS.items()},
    }


# --------------------------------------------------------------------------
# building and running


@dataclass
class Built:
    target: object
    momentum: object
    flow: object
    grid: Grid
    op: TransferOperator
    h0: GridDensity


def build(cfg: ExperimentConfig) -> Built:
    target = make_target(**cfg.target)
    momentum = make_momentum(**{"dim": target.dim, **cfg.momentum})
    energy = HamiltonianEnergy(target, momentum)
    flow = make_flow(cfg.flow["kind"], energy, cfg.flow["time"], cfg.flow.get("steps"))
    grid = Grid(target.dim, float(cfg.grid["half_width"]), int(cfg.grid["points"]))
    op = TransferOperator(flow, grid, momentum_nodes=cfg.momentum_nodes)
    return Built(target, momentum, flow, grid, op, initial_density(grid, cfg.initial, target))


@dataclass
class RunResult:
    out_dir: Path
    checks: list
    spectral: object
    trace: object
    sampler_rows: list
    warnings: list
    files: list


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def run_experiment(cfg: ExperimentConfig, out_dir=None, log=None) -> RunResult:
    """Run one experiment and write its artifact files into ``out_dir``."""
    out = Path(out_dir or cfg.output or "lqhmc-run")
    out.mkdir(parents=True, exist_ok=True)
    say = log or (lambda msg: None)
    for w in cfg.warnings:
        say(f"warning: {w}")

    b = build(cfg)
    say(f"operator: {b.op.scheme} scheme, {b.grid.size} nodes, flow {b.flow.kind} t={b.flow.time:.6g}")
    trace = iterate_and_trace(b.op, b.h0, cfg.iterations, cfg.exponents)
    files = []
    trace.write_csv(out / "trace.csv")
    files.append("trace.csv")

    spectral = estimate_spectral_gap(b.op, 2.0, seed=cfg.seed)
    run_warnings = list(cfg.warnings)
    defects = {}
    if not b.flow.conserves_energy:
        defects = {"energy_defect": b.op.energy_defect, "fixed_point_residual": b.op.fixed_point_residual()}
        run_warnings.append(f"approximate flow: fixed-point residual {defects['fixed_point_residual']:.3e}, "
                            f"max energy defect {defects['energy_defect']:.3e}")
    (out / "spectral.json").write_text(json.dumps(_json_safe({**spectral.to_dict(), **defects}),
                                                  indent=2, sort_keys=True) + "\n")
    files.append("spectral.json")

    checks = []
    if cfg.checks:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            checks = property_checks(b.op, b.h0, cfg.exponents, n_max=cfg.iterations, seed=cfg.seed,
                                  trace=trace, spectral=spectral)
        _write_rows(out / "checks.csv", ["label", "status", "residual", "tolerance", "note"],
                    [(c.label, c.status, c.residual, c.tolerance, c.note) for c in checks])
        files.append("checks.csv")
        for c in checks:
            say(f"{c.status:>4}  {c.label}")

    rows = []
    if cfg.particles:
        rule = None if b.flow.conserves_energy else METROPOLIS
        chain = ChainConfig(b.flow, cfg.sampler_steps, cfg.particles, accept_rule=rule)
        snaps = run_chain(chain, initial_ensemble(b.h0, cfg.particles, cfg.seed), resample=grid_sampler(b.h0))
        h = b.h0.values
        for s in snaps:
            rows.append(compare_to_operator(s, GridDensity(b.grid, h)))
            h = b.op.apply_values(h)
        _write_rows(out / "sampler.csv",
                    ["n", "l1", "mc_error", "ratio", "acceptance", "resampled", "outliers"],
                    [(r.generation, r.l1, r.mc_error, r.ratio, r.acceptance, r.resampled, r.outliers)
                     for r in rows])
        files.append("sampler.csv")

    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "warnings": run_warnings,
        "operator": b.op.describe(),
        "files": files,
        "versions": {"lqhmc": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "pyyaml": yaml.__version__, "python": platform.python_version()},
    }
    manifest["config"]["output"] = None
    (out / "manifest.json").write_text(json.dumps(_json_safe(manifest), indent=2, sort_keys=True) + "\n")
    files.append("manifest.json")
    return RunResult(out, checks, spectral, trace, rows, run_warnings, files)
