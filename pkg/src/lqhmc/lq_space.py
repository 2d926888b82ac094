"""Discretised weighted L^q space over a truncated position box.

Every integral is the tensor trapezoid rule on a uniform grid. For a target
``f`` the norm, pairing and conjugacy map are

    ||h||_q^q  = sum_i c_i |h_i / f_i|^q f_i
    <a, b>     = sum_i c_i a_i b_i / f_i
    h*         = h (|h| / f)^(q - 2)

with ``c_i`` the trapezoid weights.  Nodes where ``f < F_FLOOR`` are dropped
from likelihood quotients; a density that is non-zero there is a domain
error.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import DomainError, GridMismatchError

F_FLOOR = 1e-300
MIN_POINTS = 16
CONJUGACY_TOL = 1e-12


@dataclass(frozen=True)
class ExponentPair:
    """Conjugate exponents with ``q + p = q p``."""

    q: float
    p: float

    def __post_init__(self):
        if not (self.q > 1 and self.p > 1):
            raise DomainError(f"exponents must satisfy q > 1 and p > 1, got q={self.q}, p={self.p}")
        if abs(self.q + self.p - self.q * self.p) > CONJUGACY_TOL * max(1.0, self.q * self.p):
            raise DomainError(f"q={self.q} and p={self.p} are not conjugate (q + p != q p)")

    @classmethod
    def from_q(cls, q) -> "ExponentPair":
        q = float(q)
        if not q > 1 or not np.isfinite(q):
            raise DomainError(f"exponent q must satisfy q > 1 (finite), got {q}")
        return cls(q, 2.0 if q == 2.0 else q / (q - 1.0))

    def dual(self) -> "ExponentPair":
        return ExponentPair(self.p, self.q)


def as_exponents(e) -> ExponentPair:
    return e if isinstance(e, ExponentPair) else ExponentPair.from_q(e)


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on ``[-half_width, half_width]^dim``."""

    dim: int
    half_width: float
    points: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("grid dimension must be 1 or 2")
        if self.points < MIN_POINTS:
            raise ValueError(f"grid needs at least {MIN_POINTS} points per axis")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")

    @cached_property
    def axis(self) -> np.ndarray:
        n = self.points
        # integer numerators make the node set exactly symmetric about 0
        return self.half_width * (2.0 * np.arange(n) - (n - 1)) / (n - 1)

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / (self.points - 1)

    @property
    def shape(self):
        return (self.points,) * self.dim

    @property
    def size(self) -> int:
        return self.points ** self.dim

    @cached_property
    def axis_weights(self) -> np.ndarray:
        w = np.full(self.points, self.spacing)
        w[0] = w[-1] = 0.5 * self.spacing
        return w

    @cached_property
    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(size, dim)`` in C order."""
        mesh = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @cached_property
    def weights(self) -> np.ndarray:
        w = self.axis_weights
        for _ in range(self.dim - 1):
            w = np.multiply.outer(w, self.axis_weights)
        return w.ravel()

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))

    def cell_index(self, x) -> np.ndarray:
        """Flat index of the quadrature cell holding each point, ``-1`` outside.

        Cell ``k`` is ``[x_k - dx/2, x_k + dx/2)`` clipped to the box, so the
        cell widths are exactly the trapezoid weights.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        L, dx = self.half_width, self.spacing
        idx = np.floor((x + L) / dx + 0.5).astype(np.int64)
        inside = np.all((x >= -L) & (x <= L), axis=-1)
        idx = np.clip(idx, 0, self.points - 1)
        flat = np.ravel_multi_index(tuple(idx.T), self.shape)
        return np.where(inside, flat, -1)

    def describe(self) -> dict:
        return {"dim": self.dim, "half_width": self.half_width, "points": self.points}


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Node values of a density on a grid; read-only after construction.

    ``signed=True`` admits negative values (the zero-mean subspace used in
    spectral diagnostics); otherwise values must be non-negative.
    """

    grid: Grid
    values: np.ndarray
    signed: bool = field(default=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size != self.grid.size:
            raise GridMismatchError(f"{v.size} values for a grid of {self.grid.size} nodes")
        if not np.all(np.isfinite(v)):
            raise DomainError("grid density values must be finite")
        if not self.signed and np.any(v < 0):
            raise DomainError("negative values in an unsigned grid density")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid: Grid, fun, signed=False) -> "GridDensity":
        return cls(grid, np.asarray(fun(grid.nodes), dtype=float), signed)

    @classmethod
    def of_target(cls, grid: Grid, target) -> "GridDensity":
        return cls(grid, target(grid.nodes))

    def integral(self) -> float:
        return self.grid.integrate(self.values)

    def with_values(self, values, signed=None) -> "GridDensity":
        return GridDensity(self.grid, values, self.signed if signed is None else signed)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def box_indicator(grid: Grid, low=-1.0, high=1.0) -> GridDensity:
    """Cell-averaged indicator of ``[low, high]^d``.

    Node ``k`` holds the fraction of its quadrature cell inside the box, so
    the trapezoid integral equals the box volume exactly (a plain nodal
    indicator is off by up to one cell width per edge).
    """
    L, dx = grid.half_width, grid.spacing
    lo = np.maximum(grid.axis - 0.5 * dx, -L)
    hi = np.minimum(grid.axis + 0.5 * dx, L)
    frac = np.clip(np.minimum(hi, high) - np.maximum(lo, low), 0.0, None) / (hi - lo)
    vals = frac
    for _ in range(grid.dim - 1):
        vals = np.multiply.outer(vals, frac)
    return GridDensity(grid, vals.ravel())


def _same_grid(*densities):
    g = densities[0].grid
    for d in densities[1:]:
        if d.grid != g:
            raise GridMismatchError(f"grid mismatch: {g} vs {d.grid}")
    return g


def target_on_grid(target, grid: Grid) -> np.ndarray:
    if target.dim != grid.dim:
        raise GridMismatchError(f"target dimension {target.dim} does not match grid dimension {grid.dim}")
    return target(grid.nodes)


def likelihood(values, f_values) -> np.ndarray:
    """``h / f`` with zero on floored nodes; non-zero mass there raises."""
    values = np.asarray(values, dtype=float)
    ok = f_values >= F_FLOOR
    if not np.all(ok):
        bad = ~ok
        if values.ndim > 1:
            bad = bad.reshape((-1,) + (1,) * (values.ndim - 1))
        if np.any((values != 0) & bad):
            raise DomainError("density is non-zero where the target is below the floor 1e-300")
    safe = np.where(ok, f_values, 1.0)
    if values.ndim > 1:
        safe = safe.reshape((-1,) + (1,) * (values.ndim - 1))
        ok = ok.reshape(safe.shape)
    return np.where(ok, values / safe, 0.0)


def _norm_values(values, f_values, weights, q):
    r = likelihood(values, f_values)
    return float(np.dot(weights, np.abs(r) ** q * f_values)) ** (1.0 / q)


def norm(h: GridDensity, f, e) -> float:
    """f-weighted L^q norm ``(int |h/f|^q f)^(1/q)``."""
    e = as_exponents(e)
    return _norm_values(h.values, target_on_grid(f, h.grid), h.grid.weights, e.q)


def pairing(a: GridDensity, b: GridDensity, f) -> float:
    """Duality pairing ``<a, b> = int a b / f``."""
    grid = _same_grid(a, b)
    fv = target_on_grid(f, grid)
    return float(np.dot(grid.weights, likelihood(a.values, fv) * b.values))


def conjugate(h: GridDensity, f, e) -> GridDensity:
    """Duality map ``h* = h (|h|/f)^(q-2)`` from L^q into L^p."""
    e = as_exponents(e)
    fv = target_on_grid(f, h.grid)
    r = likelihood(h.values, fv)
    # h* = f sign(r) |r|^(q-1); q = 2 returns h untouched
    if e.q == 2.0:
        return h
    return h.with_values(fv * np.sign(r) * np.abs(r) ** (e.q - 1.0))


def alpha(h: GridDensity, f) -> float:
    """Mass-matching coefficient ``int h / int f`` of the fixed ray."""
    fv = target_on_grid(f, h.grid)
    return h.integral() / h.grid.integrate(fv)


# --------------------------------------------------------------------------
# text serialisation

_DENSITY_MAGIC = "# lqhmc grid-density v1"


def write_grid_density(path, h: GridDensity) -> None:
    g = h.grid
    lines = [
        _DENSITY_MAGIC,
        f"# dim={g.dim} half_width={g.half_width!r} points={g.points} signed={int(h.signed)}",
    ]
    lines.extend(repr(float(v)) for v in h.values)
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_header(line):
    out = {}
    for tok in line.lstrip("#").split():
        k, _, v = tok.partition("=")
        out[k] = v
    return out


def read_grid_density(path) -> GridDensity:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != _DENSITY_MAGIC:
        raise ValueError(f"{path}: not a grid-density file")
    meta = _parse_header(text[1])
    grid = Grid(int(meta["dim"]), float(meta["half_width"]), int(meta["points"]))
    values = np.array([float(s) for s in text[2:] if s.strip()])
    return GridDensity(grid, values, bool(int(meta.get("signed", 0))))
