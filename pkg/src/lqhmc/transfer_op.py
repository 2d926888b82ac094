"""The HMC transfer operator on grid densities.

One HMC step pushes a density ``h`` to

    (T h)(q) = int_P (h g)(H(q, p)) dp = f(q) sum_j w_j (h/f)(Q(q, p_j)) [e^{-dE}]

where ``(Q, P) = H(q, p_j)`` and ``dE`` is the energy defect of the flow,
identically zero for exact flows. The likelihood ``h/f`` is evaluated off the
grid by multilinear interpolation. The box edge is absorbing: landing points
outside it contribute nothing. Clamping them onto the edge node instead would
multiply a negligible flux by ``h/f`` at the edge, which is huge for any ``h``
with heavier tails than ``f``. On the default boxes the dropped flux of
``f`` is below 1e-15, so ``T f = f`` still holds to rounding for exact flows.

Two momentum rules are used:

``aligned``
    Exact Gaussian rotation only. For each output node the momentum nodes
    are ``p_k = (x_k - q cos t) / sin t`` so every landing point is a grid
    node and the interpolation is exact; the weights are the position
    trapezoid weights divided by ``|sin t|``. The resulting kernel is
    exactly reversible with respect to the trapezoid measure ``c f``, so
    mass, duality and self-adjointness hold to rounding.

``interpolated``
    Fixed momentum quadrature (Gauss-Hermite for a standard normal ``g``,
    trapezoid on a momentum box otherwise) plus interpolation. Used for
    leapfrog flows and for rotation times too close to a multiple of pi for
    the aligned rule to resolve.

``T^dagger`` is the same construction with ``H^-1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import FlowDivergenceError, GridMismatchError, SizeGuardError
from .lq_space import F_FLOOR, Grid, GridDensity, likelihood, target_on_grid
from .phase_flow import ExactGaussianRotation, PhaseFlow

MAX_DENSE_NODES = 20_000
# aligned rule needs the rotated Gaussian kernel to be resolved by the grid
ALIGN_MIN_RATIO = 1.5
DEFAULT_NODES_2D = 17
# landing points this close (relative) outside the box count as on its edge
EDGE_SLACK = 1e-12

FORWARD = "forward"
ADJOINT = "adjoint"


def _aligned_kernel(grid: Grid, flow: ExactGaussianRotation) -> np.ndarray:
    x = grid.axis
    L = grid.half_width
    s = abs(flow.sin)
    m = x * flow.cos
    z = (x[None, :] - m[:, None]) / s
    # mass landing outside the box is dropped; it is below 1e-15 on the default boxes
    return grid.axis_weights[None, :] * np.exp(-0.5 * z * z) / (np.sqrt(2.0 * np.pi) * s)


def _interp_corners(grid: Grid, Q: np.ndarray):
    """Flat corner indices and multilinear weights, shapes ``(M, 2^d)``.

    Points outside the box get zero weight.
    """
    L, dx, n, d = grid.half_width, grid.spacing, grid.points, grid.dim
    inside = np.all(np.abs(Q) <= L * (1.0 + EDGE_SLACK), axis=-1)
    s = (np.clip(Q, -L, L) + L) / dx
    i0 = np.clip(np.floor(s).astype(np.int64), 0, n - 2)
    frac = s - i0
    idx, wts = [], []
    for corner in range(2 ** d):
        bits = [(corner >> k) & 1 for k in range(d)]
        ii = i0 + np.array(bits)
        w = np.ones(len(Q))
        for k, b in enumerate(bits):
            w = w * (frac[:, k] if b else 1.0 - frac[:, k])
        idx.append(np.ravel_multi_index(tuple(ii.T), grid.shape))
        wts.append(np.where(inside, w, 0.0))
    return np.stack(idx, axis=1), np.stack(wts, axis=1)


class TransferOperator:
    """Discrete transfer operator ``T`` (or ``T^dagger``) on one grid.

    Parameters
    ----------
    flow : PhaseFlow
        The Hamiltonian motion ``H``. Target and momentum default to the
        flow's energy.
    grid : Grid
        Position grid; must match the target dimension.
    direction : {"forward", "adjoint"}
        ``adjoint`` builds ``T^dagger`` from ``H^-1``.
    momentum_nodes : int, optional
        Node count of the momentum quadrature for the interpolated rule.
    scheme : {"auto", "aligned", "interpolated"}
        ``auto`` picks ``aligned`` whenever the flow allows it.
    """

    def __init__(self, flow: PhaseFlow, grid: Grid, momentum=None, target=None,
                 direction=FORWARD, momentum_nodes=None, scheme="auto"):
        if direction not in (FORWARD, ADJOINT):
            raise ValueError(f"direction must be {FORWARD!r} or {ADJOINT!r}")
        self.flow = flow
        self.grid = grid
        self.momentum = momentum if momentum is not None else flow.energy.momentum
        self.target = target if target is not None else flow.energy.target
        if self.target.dim != grid.dim or self.momentum.dim != grid.dim:
            raise GridMismatchError("grid, target and momentum dimensions must agree")
        self.direction = direction
        self.momentum_nodes = momentum_nodes
        self.scheme = self._pick_scheme(scheme)
        self.f_values = target_on_grid(self.target, grid)
        self.f_values.flags.writeable = False
        self._build()

    # -- construction -----------------------------------------------------

    def _aligned_ok(self) -> bool:
        return (isinstance(self.flow, ExactGaussianRotation)
                and abs(self.flow.sin) >= ALIGN_MIN_RATIO * self.grid.spacing)

    def _pick_scheme(self, scheme):
        if scheme == "auto":
            return "aligned" if self._aligned_ok() else "interpolated"
        if scheme == "aligned" and not self._aligned_ok():
            raise ValueError("aligned momentum rule needs an exact rotation with |sin t| >= 1.5 grid spacings")
        if scheme not in ("aligned", "interpolated"):
            raise ValueError(f"unknown scheme {scheme!r}")
        return scheme

    def _build(self):
        if self.scheme == "aligned":
            self._axis_kernel = _aligned_kernel(self.grid, self.flow)
            self._sparse = None
            self.energy_defect = 0.0
            self.quadrature_nodes = self.grid.points ** self.grid.dim
            return
        n_nodes = self.momentum_nodes
        if n_nodes is None and self.grid.dim == 2:
            n_nodes = DEFAULT_NODES_2D
        quad = self.momentum.quadrature(n_nodes)
        self.quadrature_nodes = len(quad)
        nodes = self.grid.nodes
        N, J, d = len(nodes), len(quad), self.grid.dim
        q = np.repeat(nodes, J, axis=0)
        p = np.tile(quad.nodes, (N, 1))
        step = self.flow.map if self.direction == FORWARD else self.flow.map_inverse
        Q, P = step(q, p)
        if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(P))):
            raise FlowDivergenceError(f"{self.flow.kind} flow diverged while building the operator")
        weight = np.tile(quad.weights, N)
        if self.flow.conserves_energy:
            self.energy_defect = 0.0
        else:
            with np.errstate(over="ignore"):
                dE = self.flow.energy(Q, P) - self.flow.energy(q, p)
                inside = np.all(np.abs(Q) <= self.grid.half_width * (1.0 + EDGE_SLACK), axis=-1)
                self.energy_defect = float(np.max(np.abs(dE[inside]), initial=0.0))
                weight = np.where(inside, weight * np.exp(-np.where(inside, dE, 0.0)), 0.0)
        idx, w = _interp_corners(self.grid, Q)
        rows = np.repeat(np.arange(N), J * 2 ** d)
        data = (weight[:, None] * w).ravel()
        self._sparse = sparse.csr_matrix((data, (rows, idx.ravel())), shape=(N, N))
        self._axis_kernel = None
        del q, p, Q, P

    # -- application ------------------------------------------------------

    def _likelihood_map(self, r):
        """Apply the averaging kernel to likelihood values, shape ``(N,)`` or ``(N, B)``."""
        if self._sparse is not None:
            return self._sparse @ r
        K = self._axis_kernel
        if self.grid.dim == 1:
            return K @ r
        n = self.grid.points
        R = r.reshape((n, n) + r.shape[1:])
        out = np.einsum("ik,kl...,jl->ij...", K, R, K, optimize=True)
        return out.reshape(r.shape)

    def _transpose_map(self, u):
        """``A^T u`` for the averaging kernel ``A`` of :meth:`_likelihood_map`."""
        if self._sparse is not None:
            return self._sparse.T @ u
        K = self._axis_kernel
        if self.grid.dim == 1:
            return K.T @ u
        n = self.grid.points
        U = u.reshape((n, n) + u.shape[1:])
        return np.einsum("ki,kl...,lj->ij...", K, U, K, optimize=True).reshape(u.shape)

    def transpose_values(self, values) -> np.ndarray:
        """Exact adjoint of the discrete ``T`` in the pairing ``sum c a b / f``.

        ``(T* k)_j = (A^T (c k))_j / c_j``. It equals ``T^dagger`` built from
        ``H^-1`` only when the discretisation is reversible (aligned rule).
        """
        values = np.asarray(values, dtype=float)
        c = self.grid.weights if values.ndim == 1 else self.grid.weights[:, None]
        return self._transpose_map(c * values) / c

    def apply_values(self, values) -> np.ndarray:
        """``T`` on raw node values; accepts a batch of columns ``(N, B)``."""
        values = np.asarray(values, dtype=float)
        fv = self.f_values if values.ndim == 1 else self.f_values[:, None]
        return fv * self._likelihood_map(likelihood(values, self.f_values))

    def apply(self, h: GridDensity) -> GridDensity:
        if h.grid != self.grid:
            raise GridMismatchError("density and operator live on different grids")
        return h.with_values(self.apply_values(h.values))

    def __call__(self, h: GridDensity) -> GridDensity:
        return self.apply(h)

    # -- structure --------------------------------------------------------

    @property
    def is_self_adjoint(self) -> bool:
        """Configuration-level self-adjointness: reversible flow and even ``g``."""
        return self.flow.is_reversible and self.momentum.is_even

    @cached_property
    def adjoint(self) -> "TransferOperator":
        other = ADJOINT if self.direction == FORWARD else FORWARD
        op = TransferOperator(self.flow, self.grid, self.momentum, self.target, other,
                              self.momentum_nodes, self.scheme)
        op.__dict__["adjoint"] = self
        return op

    def apply_adjoint(self, h: GridDensity) -> GridDensity:
        return self.adjoint.apply(h)

    def likelihood_matrix(self) -> np.ndarray:
        """Dense averaging kernel acting on likelihood values."""
        N = self.grid.size
        if N > MAX_DENSE_NODES:
            raise SizeGuardError(f"{N} nodes exceed the dense limit of {MAX_DENSE_NODES}")
        if self._sparse is not None:
            return self._sparse.toarray()
        K = self._axis_kernel
        return K.copy() if self.grid.dim == 1 else np.kron(K, K)

    def fixed_point_residual(self) -> float:
        """``||T f - f||_2 / ||f||_2`` in the f-weighted L^2 norm."""
        fv = self.f_values
        r = likelihood(self.apply_values(fv) - fv, fv)
        w = self.grid.weights
        return float(np.sqrt(np.dot(w, r * r * fv)) / np.sqrt(np.dot(w, fv)))

    def describe(self) -> dict:
        return {
            "flow": self.flow.describe(),
            "target": self.target.name,
            "momentum": self.momentum.name,
            "grid": self.grid.describe(),
            "direction": self.direction,
            "scheme": self.scheme,
            "quadrature_nodes": self.quadrature_nodes,
            "energy_defect": self.energy_defect,
        }


class SymmetrizedOperator:
    """``S = T* T`` with ``T*`` the exact discrete adjoint of ``T``.

    ``S`` is self-adjoint and positive in the f-weighted pairing to rounding,
    whatever the flow. For reversible discretisations ``T* = T^dagger``.
    """

    scheme = "symmetrized"

    def __init__(self, op: TransferOperator):
        self.base = op
        self.grid = op.grid
        self.target = op.target
        self.f_values = op.f_values

    is_self_adjoint = True

    @property
    def adjoint(self):
        return self

    def apply_values(self, values):
        return self.base.transpose_values(self.base.apply_values(values))

    def apply(self, h: GridDensity) -> GridDensity:
        if h.grid != self.grid:
            raise GridMismatchError("density and operator live on different grids")
        return h.with_values(self.apply_values(h.values))

    __call__ = apply

    def apply_adjoint(self, h):
        return self.apply(h)

    def likelihood_matrix(self):
        A = self.base.likelihood_matrix()
        cf = self.grid.weights * self.f_values
        ok = cf > 0
        inv = np.where(ok, 1.0 / np.where(ok, cf, 1.0), 0.0)
        return inv[:, None] * (A.T @ (cf[:, None] * A))

    def fixed_point_residual(self):
        fv = self.f_values
        r = likelihood(self.apply_values(fv) - fv, fv)
        w = self.grid.weights
        return float(np.sqrt(np.dot(w, r * r * fv)) / np.sqrt(np.dot(w, fv)))

    def describe(self):
        d = self.base.describe()
        d["scheme"] = f"symmetrized({d['scheme']})"
        return d


def self_adjoint_view(op):
    """``op`` itself when self-adjoint, otherwise ``T* T``."""
    return op if op.is_self_adjoint else SymmetrizedOperator(op)


def apply_T(op: TransferOperator, h: GridDensity) -> GridDensity:
    return op.apply(h)


def apply_T_adjoint(op: TransferOperator, h: GridDensity) -> GridDensity:
    return op.apply_adjoint(h)


def apply_S(op: TransferOperator, h: GridDensity) -> GridDensity:
    return op.adjoint.apply(op.apply(h))


# --------------------------------------------------------------------------
# dense assembly


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """Dense matrix of ``T`` acting on node values: ``(T h)_i = sum_k M_ik h_k``."""

    matrix: np.ndarray
    grid: Grid
    f_values: np.ndarray
    direction: str = FORWARD

    @property
    def metric_weights(self) -> np.ndarray:
        """Diagonal of the f-weighted inner product ``<a, b> = sum_i w_i a_i b_i``."""
        fv = self.f_values
        ok = fv >= F_FLOOR
        return np.where(ok, self.grid.weights / np.where(ok, fv, 1.0), 0.0)

    def symmetric_form(self) -> np.ndarray:
        """``W^1/2 M W^-1/2``; its 2-norm is the f-weighted operator norm."""
        w = np.sqrt(self.metric_weights)
        inv = np.where(w > 0, 1.0 / np.where(w > 0, w, 1.0), 0.0)
        return w[:, None] * self.matrix * inv[None, :]

    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.symmetric_form(), compute_uv=False)

    def weighted_norm(self) -> float:
        return float(self.singular_values()[0])

    def __matmul__(self, other):
        return self.matrix @ np.asarray(other)

    def write(self, path) -> None:
        """Dense row-major text dump with a two-line header."""
        g = self.grid
        header = (f"lqhmc operator-matrix v1\n"
                  f"rows={self.matrix.shape[0]} cols={self.matrix.shape[1]} dim={g.dim} "
                  f"half_width={g.half_width!r} points={g.points} direction={self.direction}")
        np.savetxt(path, self.matrix, fmt="%.17g", header=header)


def read_operator_matrix(path, target) -> OperatorMatrix:
    lines = Path(path).read_text().splitlines()
    if not lines or "lqhmc operator-matrix v1" not in lines[0]:
        raise ValueError(f"{path}: not an operator-matrix dump")
    meta = dict(tok.split("=", 1) for tok in lines[1].lstrip("# ").split())
    grid = Grid(int(meta["dim"]), float(meta["half_width"]), int(meta["points"]))
    matrix = np.loadtxt(path, ndmin=2)
    rows, cols = int(meta["rows"]), int(meta["cols"])
    if matrix.shape != (rows, cols):
        raise ValueError(f"{path}: header says {rows}x{cols}, body is {matrix.shape}")
    return OperatorMatrix(matrix, grid, target_on_grid(target, grid), meta.get("direction", FORWARD))


def assemble_matrix(op) -> OperatorMatrix:
    """Column ``k`` is ``T`` applied to the ``k``-th nodal hat density."""
    N = op.grid.size
    if N > MAX_DENSE_NODES:
        raise SizeGuardError(f"{N} nodes exceed the dense limit of {MAX_DENSE_NODES}")
    fv = op.f_values
    ok = fv >= F_FLOOR
    inv = np.where(ok, 1.0 / np.where(ok, fv, 1.0), 0.0)
    M = fv[:, None] * op.likelihood_matrix() * inv[None, :]
    return OperatorMatrix(M, op.grid, fv, getattr(op, "direction", FORWARD))


# --------------------------------------------------------------------------
# coverage


@dataclass(frozen=True)
class CoverageReport:
    min_occupancy: float
    mean_occupancy: float
    sources: int
    probes_per_source: int

    @property
    def full(self) -> bool:
        return self.min_occupancy >= 1.0


def coverage_occupancy(flow: PhaseFlow, grid: Grid, momentum_half_width=None,
                       probes_per_axis=None, max_sources=None, direction=FORWARD) -> CoverageReport:
    """Fraction of grid cells reached by ``Q(q, p)`` as ``p`` sweeps a momentum box.

    This is the discrete form of the one-step coverage ``Q(q, P) = Q``; an
    exact rotation at a multiple of pi reaches a single cell.
    """
    L = grid.half_width
    if momentum_half_width is None:
        momentum_half_width = max(8.0, 4.0 * L / flow.time)
    ratio = max(1.0, momentum_half_width / L)
    if probes_per_axis is None:
        probes_per_axis = int((8 if grid.dim == 1 else 2) * grid.points * np.ceil(ratio))
    if max_sources is None:
        max_sources = 64 if grid.dim == 1 else 16
    sources = grid.nodes
    if len(sources) > max_sources:
        pick = np.unique(np.linspace(0, len(sources) - 1, max_sources).round().astype(int))
        sources = sources[pick]
    axis = np.linspace(-momentum_half_width, momentum_half_width, probes_per_axis)
    probes = np.stack([m.ravel() for m in np.meshgrid(*([axis] * grid.dim), indexing="ij")], axis=-1)
    step = flow.map if direction == FORWARD else flow.map_inverse
    occ = []
    for q in sources:
        Q, P = step(np.broadcast_to(q, probes.shape), probes)
        good = np.all(np.isfinite(Q), axis=-1)
        cells = grid.cell_index(Q[good])
        hit = np.unique(cells[cells >= 0])
        occ.append(len(hit) / grid.size)
    occ = np.array(occ)
    return CoverageReport(float(occ.min()), float(occ.mean()), len(sources), len(probes))
