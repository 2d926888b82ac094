"""Target densities on position space and auxiliary momentum densities.

A target ``f`` is unnormalised and lives on a truncation box ``[-L, L]^d``.
A momentum density ``g`` is normalised, strictly positive, and carries a
quadrature rule used to integrate over momentum space.

Positions and momenta are arrays whose last axis has length ``dim``.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import special, stats

FD_STEP = 1e-5


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != dim:
        raise ValueError(f"expected last axis of length {dim}, got shape {x.shape}")
    return x


def central_gradient(fun, x, step=FD_STEP):
    """Central finite-difference gradient of a scalar field along the last axis."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for k in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[k] = step
        grad[..., k] = (fun(x + e) - fun(x - e)) / (2.0 * step)
    return grad


class TargetDensity:
    """Unnormalised target density ``f`` with a truncation box.

    Parameters
    ----------
    name : str
        Registry name, echoed in reports.
    dim : int
        Dimension of position space (1 or 2).
    half_width : float
        The truncation box is ``[-half_width, half_width]`` per axis.
    log_density : callable
        Vectorised ``log f``; takes ``(..., dim)`` and returns ``(...)``.
    grad_potential : callable, optional
        Vectorised gradient of ``-log f``. Central differences with step
        ``1e-5`` are used when omitted.
    params : dict, optional
        Construction parameters, kept for config echo.
    """

    def __init__(self, name, dim, half_width, log_density, grad_potential=None, params=None):
        if dim not in (1, 2):
            raise ValueError("only dimensions 1 and 2 are supported")
        if half_width <= 0:
            raise ValueError("half_width must be positive")
        self.name = name
        self.dim = int(dim)
        self.half_width = float(half_width)
        self._log_density = log_density
        self._grad_potential = grad_potential
        self.params = dict(params or {})

    @property
    def has_analytic_gradient(self) -> bool:
        return self._grad_potential is not None

    def log_density(self, q):
        return self._log_density(_as_points(q, self.dim))

    def __call__(self, q):
        return np.exp(self.log_density(q))

    def potential(self, q):
        return -self.log_density(q)

    def grad_potential(self, q):
        q = _as_points(q, self.dim)
        if self._grad_potential is not None:
            return self._grad_potential(q)
        return central_gradient(self.potential, q)

    def __repr__(self):
        return f"TargetDensity({self.name!r}, dim={self.dim}, half_width={self.half_width})"


def standard_gaussian(dim=1, half_width=8.0) -> TargetDensity:
    """``f(q) = exp(-|q|^2 / 2)``; its integral over R^d is ``(2 pi)^(d/2)``."""
    return TargetDensity(
        "gaussian",
        dim,
        half_width,
        lambda q: -0.5 * np.sum(q * q, axis=-1),
        lambda q: q.copy(),
        {"dim": dim, "half_width": half_width},
    )


def double_well(half_width=3.0) -> TargetDensity:
    """``f(q) = exp(-(q^2 - 1)^2)`` in one dimension."""

    def log_f(q):
        x = q[..., 0]
        return -((x * x - 1.0) ** 2)

    def grad(q):
        x = q[..., 0]
        return (4.0 * x * (x * x - 1.0))[..., None]

    return TargetDensity("double-well", 1, half_width, log_f, grad, {"half_width": half_width})


def gaussian_mixture(weights=(0.3, 0.7), means=(-2.0, 1.5), sds=(0.5, 1.0), half_width=10.0) -> TargetDensity:
    """Asymmetric one-dimensional mixture of Gaussians (unnormalised components)."""
    w = np.asarray(weights, dtype=float)
    mu = np.asarray(means, dtype=float)
    sd = np.asarray(sds, dtype=float)
    if not (w.shape == mu.shape == sd.shape) or np.any(w <= 0) or np.any(sd <= 0):
        raise ValueError("mixture weights, means and sds must match and be positive")
    logw = np.log(w)

    def comp(q):
        z = (q[..., 0][..., None] - mu) / sd
        return logw - 0.5 * z * z, z

    def log_f(q):
        return special.logsumexp(comp(q)[0], axis=-1)

    def grad(q):
        lc, z = comp(q)
        resp = np.exp(lc - special.logsumexp(lc, axis=-1)[..., None])
        return np.sum(resp * z / sd, axis=-1)[..., None]

    return TargetDensity(
        "gaussian-mixture",
        1,
        half_width,
        log_f,
        grad,
        {"weights": list(w), "means": list(mu), "sds": list(sd), "half_width": half_width},
    )


def custom_target(log_density: Callable, dim=1, half_width=8.0, name="custom",
                  grad_potential: Optional[Callable] = None) -> TargetDensity:
    """Wrap a user-supplied log-density; the gradient falls back to central differences."""
    return TargetDensity(name, dim, half_width, log_density, grad_potential)


TARGETS = {
    "gaussian": standard_gaussian,
    "double-well": double_well,
    "gaussian-mixture": gaussian_mixture,
}


def make_target(name, **params) -> TargetDensity:
    try:
        factory = TARGETS[name]
    except KeyError:
        raise KeyError(f"unknown target {name!r}; known: {sorted(TARGETS)}") from None
    return factory(**params)


# --------------------------------------------------------------------------
# momentum densities


def _trapezoid_1d(half_width, n):
    nodes = np.linspace(-half_width, half_width, n)
    # exact antisymmetry keeps node sets closed under p -> -p
    nodes = 0.5 * (nodes - nodes[::-1])
    w = np.full(n, nodes[1] - nodes[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return nodes, w


def _tensor(nodes_1d, weights_1d, dim):
    if dim == 1:
        return nodes_1d[:, None], weights_1d
    grids = np.meshgrid(*([nodes_1d] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    w = weights_1d
    for _ in range(dim - 1):
        w = np.multiply.outer(w, weights_1d)
    return nodes, w.ravel()


class MomentumQuadrature:
    """Nodes ``p_j`` and probability weights ``w_j g(p_j)`` summing to one.

    ``raw_mass`` is the quadrature value of ``int g`` before renormalisation.
    """

    def __init__(self, nodes, weights, raw_mass, rule):
        self.nodes = nodes
        self.weights = weights
        self.raw_mass = raw_mass
        self.rule = rule

    def __len__(self):
        return len(self.weights)


class MomentumDensity:
    """Normalised auxiliary density ``g`` on momentum space.

    Subclasses provide ``log_density``, ``grad_kinetic`` (gradient of
    ``-log g``), ``sample`` and a one-dimensional quadrature rule.
    Multi-dimensional densities are products of identical factors.
    """

    name = "momentum"
    is_even = True
    default_nodes = 129

    def __init__(self, dim=1):
        if dim not in (1, 2):
            raise ValueError("only dimensions 1 and 2 are supported")
        self.dim = int(dim)

    @property
    def params(self):
        return {"dim": self.dim}

    def _log_density_1d(self, p):
        raise NotImplementedError

    def _grad_kinetic_1d(self, p):
        raise NotImplementedError

    def _sample_1d(self, rng, size):
        raise NotImplementedError

    def _quadrature_1d(self, n):
        raise NotImplementedError

    def log_density(self, p):
        p = _as_points(p, self.dim)
        return np.sum(self._log_density_1d(p), axis=-1)

    def __call__(self, p):
        return np.exp(self.log_density(p))

    def kinetic(self, p):
        return -self.log_density(p)

    def grad_kinetic(self, p):
        return self._grad_kinetic_1d(_as_points(p, self.dim))

    def sample(self, rng, size):
        """Draw ``size`` momenta, shape ``(size, dim)``."""
        return self._sample_1d(rng, (size, self.dim))

    def quadrature(self, n_nodes=None) -> MomentumQuadrature:
        n = int(n_nodes or self.default_nodes)
        nodes, w, rule = self._quadrature_1d(n)
        prob = w * np.exp(self._log_density_1d(nodes))
        nodes, prob = _tensor(nodes, prob, self.dim)
        raw = float(prob.sum())
        return MomentumQuadrature(nodes, prob / raw, raw, rule)

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"


class StandardNormalMomentum(MomentumDensity):
    """Standard Gaussian momentum; Gauss-Hermite quadrature."""

    name = "normal"

    def _log_density_1d(self, p):
        return -0.5 * p * p - 0.5 * np.log(2.0 * np.pi)

    def _grad_kinetic_1d(self, p):
        return p.copy()

    def _sample_1d(self, rng, size):
        return rng.standard_normal(size)

    def quadrature(self, n_nodes=None) -> MomentumQuadrature:
        n = int(n_nodes or self.default_nodes)
        nodes, w = hermegauss(n)
        nodes = 0.5 * (nodes - nodes[::-1])
        w = 0.5 * (w + w[::-1])
        # hermegauss weights already carry exp(-p^2/2)
        prob = w / np.sqrt(2.0 * np.pi)
        raw = float(prob.sum())
        nodes, prob = _tensor(nodes, prob, self.dim)
        return MomentumQuadrature(nodes, prob / prob.sum(), raw, "gauss-hermite")


class StudentMomentum(MomentumDensity):
    """Even heavy-tailed Student-t momentum with ``nu`` degrees of freedom."""

    name = "student"
    default_nodes = 801

    def __init__(self, nu=7.0, dim=1, half_width=40.0):
        super().__init__(dim)
        if nu <= 2:
            raise ValueError("nu must exceed 2")
        self.nu = float(nu)
        self.half_width = float(half_width)
        self._lognorm = (special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2)
                         - 0.5 * np.log(nu * np.pi))

    @property
    def params(self):
        return {"dim": self.dim, "nu": self.nu, "half_width": self.half_width}

    def _log_density_1d(self, p):
        return self._lognorm - 0.5 * (self.nu + 1) * np.log1p(p * p / self.nu)

    def _grad_kinetic_1d(self, p):
        return (self.nu + 1) * p / (self.nu + p * p)

    def _sample_1d(self, rng, size):
        return rng.standard_t(self.nu, size)

    def _quadrature_1d(self, n):
        nodes, w = _trapezoid_1d(self.half_width, n)
        return nodes, w, "trapezoid"


class SkewNormalMomentum(MomentumDensity):
    """Skew-normal momentum ``2 phi(p) Phi(a p)``; not even for ``a != 0``."""

    name = "skew-normal"
    default_nodes = 401

    def __init__(self, shape=4.0, dim=1, half_width=8.0):
        super().__init__(dim)
        self.shape = float(shape)
        self.half_width = float(half_width)
        self.is_even = self.shape == 0.0

    @property
    def params(self):
        return {"dim": self.dim, "shape": self.shape, "half_width": self.half_width}

    def _log_density_1d(self, p):
        return np.log(2.0) - 0.5 * p * p - 0.5 * np.log(2.0 * np.pi) + special.log_ndtr(self.shape * p)

    def _grad_kinetic_1d(self, p):
        a = self.shape
        z = a * p
        mills = np.exp(-0.5 * z * z - 0.5 * np.log(2.0 * np.pi) - special.log_ndtr(z))
        return p - a * mills

    def _sample_1d(self, rng, size):
        return stats.skewnorm.rvs(self.shape, size=size, random_state=rng)

    def _quadrature_1d(self, n):
        nodes, w = _trapezoid_1d(self.half_width, n)
        return nodes, w, "trapezoid"


MOMENTA = {
    "normal": StandardNormalMomentum,
    "student": StudentMomentum,
    "skew-normal": SkewNormalMomentum,
}


def make_momentum(name, **params) -> MomentumDensity:
    try:
        cls = MOMENTA[name]
    except KeyError:
        raise KeyError(f"unknown momentum density {name!r}; known: {sorted(MOMENTA)}") from None
    return cls(**params)
