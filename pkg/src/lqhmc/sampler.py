"""Particle HMC chains whose histograms cross-check the transfer operator.

One step lifts every position ``q`` to ``(q, p)`` with ``p ~ g``, moves it
along the phase flow and keeps the position part. Leapfrog chains add a
Metropolis-Hastings accept step, which restores exact invariance of ``f``
lost to the integrator.

Randomness is organised in fixed-size particle blocks. The stream for block
``b`` of generation ``n`` is ``SeedSequence(seed, spawn_key=(n, b))``, so an
ensemble depends only on the seed and never on how blocks are scheduled.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.integrate import cumulative_trapezoid

from .densities import MomentumDensity
from .lq_space import Grid, GridDensity
from .phase_flow import PhaseFlow

BLOCK_SIZE = 8192
METROPOLIS = "metropolis"


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """Immutable snapshot of ``M`` particle positions.

    Attributes
    ----------
    positions : ndarray, shape (M, d)
    generation : int
        Number of HMC steps taken since the initial draw.
    seed : int or None
        Root seed of the chain, kept for reproduction.
    resampled : int
        Particles of the last step whose flow diverged and were redrawn.
    acceptance : float
        Fraction of accepted proposals in the last step (nan before any step).
    """

    positions: np.ndarray
    generation: int = 0
    seed: int | None = None
    resampled: int = 0
    acceptance: float = float("nan")

    def __post_init__(self):
        x = np.array(self.positions, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("an ensemble needs at least one particle, positions of shape (M, d)")
        if not np.all(np.isfinite(x)):
            raise ValueError("particle positions must be finite")
        x.flags.writeable = False
        object.__setattr__(self, "positions", x)

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]


@dataclass
class ChainConfig:
    flow: PhaseFlow
    steps: int
    n_particles: int
    momentum: MomentumDensity | None = None
    accept_rule: str | None = None

    def __post_init__(self):
        if self.momentum is None:
            self.momentum = self.flow.energy.momentum
        if self.steps < 0 or self.n_particles < 1:
            raise ValueError("steps must be >= 0 and n_particles >= 1")
        if self.accept_rule not in (None, METROPOLIS):
            raise ValueError(f"unknown accept rule {self.accept_rule!r}")
        if not self.flow.conserves_energy and self.accept_rule != METROPOLIS:
            raise ValueError(f"a {self.flow.kind} flow needs accept_rule='{METROPOLIS}'")
        if self.momentum.dim != self.flow.dim:
            raise ValueError("momentum and flow dimensions differ")


def block_streams(seed, generation, n_particles, block_size=BLOCK_SIZE):
    """Yield ``(slice, Generator)`` for each particle block of a generation."""
    for b, start in enumerate(range(0, n_particles, block_size)):
        ss = np.random.SeedSequence(seed, spawn_key=(generation, b))
        yield slice(start, min(start + block_size, n_particles)), np.random.default_rng(ss)


def _move(cfg: ChainConfig, q, rng):
    """One proposal for a block; returns new positions, accept mask, diverged mask."""
    p = cfg.momentum.sample(rng, q.shape[0])
    with np.errstate(over="ignore", invalid="ignore"):
        Q, P = cfg.flow.map(q, p)
        bad = ~(np.all(np.isfinite(Q), axis=1) & np.all(np.isfinite(P), axis=1))
        if cfg.accept_rule == METROPOLIS:
            log_a = cfg.flow.energy(q, p) - cfg.flow.energy(Q, P)
            bad |= ~np.isfinite(log_a)
            u = rng.random(q.shape[0])
            accept = np.log(u) < np.minimum(0.0, np.where(bad, -np.inf, log_a))
        else:
            accept = np.ones(q.shape[0], dtype=bool)
    new = np.where(accept[:, None] & ~bad[:, None], Q, q)
    return new, accept & ~bad, bad


def hmc_step(cfg: ChainConfig, ensemble: ParticleEnsemble, rng=None, resample=None) -> ParticleEnsemble:
    """Advance every particle by one HMC transition.

    Parameters
    ----------
    rng : numpy Generator, optional
        Single stream for the whole ensemble. When omitted the block streams
        of ``ensemble.seed`` for the next generation are used.
    resample : callable, optional
        ``resample(rng, k) -> (k, d)`` positions drawn from the initial
        density, used for particles whose flow diverged. Without it a
        diverged particle stays where it was.
    """
    if ensemble.dim != cfg.flow.dim:
        raise ValueError("ensemble and flow dimensions differ")
    gen = ensemble.generation + 1
    x = ensemble.positions
    out = np.empty_like(x)
    n_acc = n_bad = 0
    if rng is not None:
        parts = [(slice(0, ensemble.size), rng)]
    else:
        if ensemble.seed is None:
            raise ValueError("no rng given and the ensemble carries no seed")
        parts = block_streams(ensemble.seed, gen, ensemble.size)
    for sl, r in parts:
        new, acc, bad = _move(cfg, x[sl], r)
        if bad.any() and resample is not None:
            new[bad] = resample(r, int(bad.sum()))
        out[sl] = new
        n_acc += int(acc.sum())
        n_bad += int(bad.sum())
    return ParticleEnsemble(out, gen, ensemble.seed, n_bad, n_acc / ensemble.size)


def run_chain(cfg: ChainConfig, initial: ParticleEnsemble, resample=None) -> list[ParticleEnsemble]:
    """All snapshots ``[initial, step 1, ..., step cfg.steps]``."""
    if initial.seed is None:
        raise ValueError("run_chain needs a seeded ensemble")
    snaps = [initial]
    for _ in range(cfg.steps):
        snaps.append(hmc_step(cfg, snaps[-1], resample=resample))
    return snaps


# --------------------------------------------------------------------------
# grid densities <-> particles


def _cell_bounds(grid: Grid, idx):
    L, dx = grid.half_width, grid.spacing
    centre = grid.axis[idx]
    return np.maximum(centre - 0.5 * dx, -L), np.minimum(centre + 0.5 * dx, L)


def grid_sampler(h: GridDensity):
    """Return ``draw(rng, k)`` sampling the piecewise-constant density of ``h``.

    Cell ``k`` carries mass ``c_k h_k`` and is sampled uniformly, so the
    histogram of the draws on the same grid estimates ``h / int h``.
    """
    grid = h.grid
    mass = grid.weights * h.values
    total = mass.sum()
    if not total > 0:
        raise ValueError("cannot sample a density with zero mass")
    cdf = np.cumsum(mass / total)
    cdf[-1] = 1.0

    def draw(rng, k):
        flat = np.minimum(np.searchsorted(cdf, rng.random(k), side="right"), grid.size - 1)
        multi = np.stack(np.unravel_index(flat, grid.shape), axis=-1)
        lo, hi = _cell_bounds(grid, multi)
        return lo + (hi - lo) * rng.random(lo.shape)

    return draw


def initial_ensemble(h0: GridDensity, n_particles: int, seed: int) -> ParticleEnsemble:
    """Generation-0 ensemble drawn from ``h0`` with the block streams of ``seed``."""
    draw = grid_sampler(h0)
    x = np.empty((n_particles, h0.grid.dim))
    for sl, r in block_streams(seed, 0, n_particles):
        x[sl] = draw(r, sl.stop - sl.start)
    return ParticleEnsemble(x, 0, seed)


def histogram_counts(ensemble: ParticleEnsemble, grid: Grid):
    """Per-cell counts and the number of particles outside the box."""
    if ensemble.dim != grid.dim:
        raise ValueError("ensemble and grid dimensions differ")
    idx = grid.cell_index(ensemble.positions)
    inside = idx >= 0
    counts = np.bincount(idx[inside], minlength=grid.size)
    return counts, int((~inside).sum())


def histogram_density(ensemble: ParticleEnsemble, grid: Grid, return_outliers=False):
    """Particle histogram normalised to unit trapezoid mass on ``grid``.

    Cell ``k`` gets ``n_k / (M_in c_k)``; particles outside the box are
    excluded and, with ``return_outliers``, their count is returned too.
    """
    counts, outliers = histogram_counts(ensemble, grid)
    m_in = counts.sum()
    if m_in == 0:
        raise ValueError("no particles inside the grid box")
    h = GridDensity(grid, counts / (m_in * grid.weights))
    return (h, outliers) if return_outliers else h


def binomial_mad(m_total: int, probs) -> np.ndarray:
    """Exact mean absolute deviation ``E|X - M p|`` of ``X ~ Bin(M, p)``.

    Closed form ``2 m (1 - p) P(X = m)`` with ``m = floor(M p) + 1``.
    """
    p = np.clip(np.asarray(probs, dtype=float), 0.0, 1.0)
    m = np.floor(m_total * p) + 1.0
    return 2.0 * m * (1.0 - p) * stats.binom.pmf(m, m_total, p)


def l1_distance(a: GridDensity, b: GridDensity) -> float:
    if a.grid != b.grid:
        raise ValueError("grid mismatch")
    return float(np.dot(a.grid.weights, np.abs(a.values - b.values)))


@dataclass(frozen=True)
class AgreementRow:
    generation: int
    l1: float
    mc_error: float
    ratio: float
    acceptance: float
    resampled: int
    outliers: int


def compare_to_operator(ensemble: ParticleEnsemble, reference: GridDensity) -> AgreementRow:
    """L1 distance from the histogram to ``reference / int reference``.

    ``mc_error`` is the expected L1 distance of an exact multinomial sample of
    the same size, ``sum_k E|n_k/M - pi_k|`` with ``pi_k`` the reference cell
    masses.
    """
    grid = reference.grid
    hist, outliers = histogram_density(ensemble, grid, return_outliers=True)
    mass = grid.weights * reference.values
    probs = np.clip(mass / mass.sum(), 0.0, 1.0)
    m_in = ensemble.size - outliers
    ref = reference.with_values(reference.values / mass.sum())
    l1 = l1_distance(hist, ref)
    err = float(binomial_mad(m_in, probs).sum() / m_in)
    return AgreementRow(ensemble.generation, l1, err, l1 / err, ensemble.acceptance, ensemble.resampled, outliers)


# --------------------------------------------------------------------------
# goodness of fit (1D)


def chi_square_stationarity(positions, target, bins=50, fine=200001):
    """Chi-square test of 1D positions against ``target`` in equal-mass bins.

    Positions are mapped through the target CDF (trapezoid on a fine grid of
    the target box) and counted in ``bins`` equal bins of ``[0, 1]``.
    Returns the ``scipy.stats.chisquare`` result.
    """
    x = np.asarray(positions, dtype=float).reshape(-1)
    L = target.half_width
    t = np.linspace(-L, L, fine)
    dens = target(t[:, None])
    cdf = cumulative_trapezoid(dens, t, initial=0.0)
    cdf /= cdf[-1]
    u = np.interp(x, t, cdf)
    counts, _ = np.histogram(u, bins=bins, range=(0.0, 1.0))
    return stats.chisquare(counts)


# --------------------------------------------------------------------------
# text dumps


def write_ensemble(path, ensemble: ParticleEnsemble) -> None:
    """One particle per row, comma separated, full precision."""
    d = ensemble.dim
    header = (
        f"generation={ensemble.generation} seed={ensemble.seed} "
        f"resampled={ensemble.resampled} acceptance={ensemble.acceptance!r}\n"
        + ",".join(f"q{k}" for k in range(d))
    )
    np.savetxt(Path(path), ensemble.positions, delimiter=",", fmt="%.17g", header=header)


def read_ensemble(path) -> ParticleEnsemble:
    lines = Path(path).read_text().splitlines()
    meta = dict(tok.split("=", 1) for tok in lines[0].lstrip("# ").split())
    x = np.loadtxt(Path(path), delimiter=",", ndmin=2)
    seed = None if meta["seed"] == "None" else int(meta["seed"])
    return ParticleEnsemble(x, int(meta["generation"]), seed, int(meta["resampled"]), float(meta["acceptance"]))
