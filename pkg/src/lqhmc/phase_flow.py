"""Hamiltonian motions on phase space and checks of their invariances.

Two flows are provided:

* ``ExactGaussianRotation``: the closed-form flow for standard Gaussian
  ``f`` and ``g``, a rotation of every ``(q_k, p_k)`` plane by angle ``t``.
* ``Leapfrog``: Stormer-Verlet integration of ``H(q, p) = U(q) + K(p)`` with
  ``U = -log f`` and ``K = -log g``, usable for any smooth pair.

Both are pure functions of their inputs. Array inputs have shape
``(..., d)``; ``map``/``map_inverse`` are vectorised over leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .densities import MomentumDensity, StandardNormalMomentum, TargetDensity, standard_gaussian
from .errors import FlowDivergenceError


@dataclass(frozen=True, eq=False)
class PhasePoint:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        if q.shape != p.shape or q.ndim != 1:
            raise ValueError(f"q and p must be vectors of equal dimension, got {q.shape} and {p.shape}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise ValueError("phase point coordinates must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def dim(self) -> int:
        return self.q.size

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])


class HamiltonianEnergy:
    """``E(q, p) = -log f(q) - log g(p)``."""

    def __init__(self, target: TargetDensity, momentum: MomentumDensity):
        if target.dim != momentum.dim:
            raise ValueError("target and momentum dimensions differ")
        self.target = target
        self.momentum = momentum

    @property
    def dim(self) -> int:
        return self.target.dim

    def __call__(self, q, p):
        return self.target.potential(q) + self.momentum.kinetic(p)


class PhaseFlow:
    """Invertible volume-preserving map ``H`` of phase space."""

    kind = "abstract"
    #: whether ``(f g) o H = f g`` holds exactly rather than to integrator order
    conserves_energy = False

    def __init__(self, energy: HamiltonianEnergy, time: float):
        if not time > 0:
            raise ValueError("integration time must be positive")
        self.energy = energy
        self.time = float(time)

    @property
    def dim(self) -> int:
        return self.energy.dim

    @property
    def is_reversible(self) -> bool:
        """Whether ``sigma o H^-1 o sigma = H`` for the momentum flip ``sigma``."""
        return self.energy.momentum.is_even

    def map(self, q, p):
        raise NotImplementedError

    def map_inverse(self, q, p):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "time": self.time}


class ExactGaussianRotation(PhaseFlow):
    """Closed-form Hamiltonian flow for standard Gaussian ``f`` and ``g``.

    ``(q, p) -> (q cos t + p sin t, -q sin t + p cos t)`` per coordinate.
    """

    kind = "exact-rotation"
    conserves_energy = True

    def __init__(self, time: float, dim: int = 1, energy: HamiltonianEnergy | None = None):
        if energy is None:
            energy = HamiltonianEnergy(standard_gaussian(dim), StandardNormalMomentum(dim))
        if energy.target.name != "gaussian" or not isinstance(energy.momentum, StandardNormalMomentum):
            raise ValueError("the exact rotation flow needs a standard Gaussian target and momentum")
        super().__init__(energy, time)
        self.cos = np.cos(self.time)
        self.sin = np.sin(self.time)

    def map(self, q, p):
        q = np.asarray(q, dtype=float)
        p = np.asarray(p, dtype=float)
        return q * self.cos + p * self.sin, p * self.cos - q * self.sin

    def map_inverse(self, q, p):
        q = np.asarray(q, dtype=float)
        p = np.asarray(p, dtype=float)
        return q * self.cos - p * self.sin, p * self.cos + q * self.sin


class Leapfrog(PhaseFlow):
    """Stormer-Verlet (kick-drift-kick) integration for ``step_count`` steps."""

    kind = "leapfrog"

    def __init__(self, energy: HamiltonianEnergy, time: float, step_count: int):
        super().__init__(energy, time)
        if int(step_count) < 1:
            raise ValueError("step_count must be a positive integer")
        self.step_count = int(step_count)

    @property
    def step_size(self) -> float:
        return self.time / self.step_count

    def _integrate(self, q, p, eps):
        grad_u = self.energy.target.grad_potential
        grad_k = self.energy.momentum.grad_kinetic
        q = np.array(q, dtype=float)
        p = np.array(p, dtype=float)
        with np.errstate(over="ignore", invalid="ignore"):
            p = p - 0.5 * eps * grad_u(q)
            for i in range(self.step_count):
                q = q + eps * grad_k(p)
                if i < self.step_count - 1:
                    p = p - eps * grad_u(q)
            p = p - 0.5 * eps * grad_u(q)
        return q, p

    def map(self, q, p):
        return self._integrate(q, p, self.step_size)

    def map_inverse(self, q, p):
        # each kick and drift is undone by its negative-step twin, in reverse order
        return self._integrate(q, p, -self.step_size)

    def describe(self) -> dict:
        return {"kind": self.kind, "time": self.time, "step_count": self.step_count}


def make_flow(kind, energy: HamiltonianEnergy, time, step_count=None) -> PhaseFlow:
    if kind == ExactGaussianRotation.kind:
        return ExactGaussianRotation(time, energy.dim, energy)
    if kind == Leapfrog.kind:
        if step_count is None:
            raise ValueError("leapfrog needs step_count")
        return Leapfrog(energy, time, step_count)
    raise KeyError(f"unknown flow kind {kind!r}")


def _checked(flow, q, p):
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
        raise FlowDivergenceError(f"{flow.kind} flow diverged (non-finite coordinates)")
    return PhasePoint(q, p)


def apply(flow: PhaseFlow, x: PhasePoint) -> PhasePoint:
    """``H(x)``; raises :class:`FlowDivergenceError` on non-finite output."""
    return _checked(flow, *flow.map(x.q, x.p))


def apply_inverse(flow: PhaseFlow, x: PhasePoint) -> PhasePoint:
    """``H^-1(x)``."""
    return _checked(flow, *flow.map_inverse(x.q, x.p))


def momentum_flip(x: PhasePoint) -> PhasePoint:
    """The involution ``(q, p) -> (q, -p)``."""
    return PhasePoint(x.q, -x.p)


@dataclass(frozen=True)
class EnergyReport:
    max_deviation: float
    mean_deviation: float
    samples: int
    flow_kind: str
    exact: bool


def _stack(samples):
    if isinstance(samples, tuple) and len(samples) == 2:
        return np.asarray(samples[0], dtype=float), np.asarray(samples[1], dtype=float)
    q = np.array([s.q for s in samples])
    p = np.array([s.p for s in samples])
    return q, p


def check_energy_invariance(flow: PhaseFlow, samples) -> EnergyReport:
    """Max and mean of ``|E(H(x)) - E(x)|`` over the samples.

    ``samples`` is a sequence of :class:`PhasePoint` or a ``(q, p)`` pair of
    arrays of shape ``(n, d)``.
    """
    q, p = _stack(samples)
    Q, P = flow.map(q, p)
    dev = np.abs(flow.energy(Q, P) - flow.energy(q, p))
    if not np.all(np.isfinite(dev)):
        raise FlowDivergenceError("non-finite energy after the flow")
    return EnergyReport(float(dev.max()), float(dev.mean()), len(dev), flow.kind, flow.conserves_energy)


def jacobian_determinant(flow: PhaseFlow, x: PhasePoint, step: float = 1e-5) -> float:
    """Central-difference Jacobian determinant of ``H`` at ``x``."""
    d = x.dim
    z = x.as_array()
    jac = np.empty((2 * d, 2 * d))
    for k in range(2 * d):
        e = np.zeros(2 * d)
        e[k] = step
        Qp, Pp = flow.map((z + e)[:d], (z + e)[d:])
        Qm, Pm = flow.map((z - e)[:d], (z - e)[d:])
        jac[:, k] = (np.concatenate([Qp, Pp]) - np.concatenate([Qm, Pm])) / (2.0 * step)
    return float(np.linalg.det(jac))


def involution_residual(flow: PhaseFlow, q, p) -> float:
    """``max |sigma H^-1 sigma (x) - H(x)|`` over the given points."""
    Qi, Pi = flow.map_inverse(q, -np.asarray(p, dtype=float))
    Q, P = flow.map(q, p)
    return float(max(np.max(np.abs(Qi - Q)), np.max(np.abs(-Pi - P))))
