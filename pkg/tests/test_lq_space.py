import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lqhmc.densities import double_well, standard_gaussian
from lqhmc.errors import DomainError, GridMismatchError
from lqhmc.lq_space import (ExponentPair, Grid, GridDensity, alpha, box_indicator, conjugate, likelihood, norm, pairing,
                            read_grid_density, write_grid_density)

from conftest import uniform_on

SQRT_2PI = 2.5066282746310007
ALPHA_UNIFORM = 0.7978845608028654  # 2 / sqrt(2 pi)

F = standard_gaussian()
G64 = Grid(1, 8.0, 64)
exponent = st.sampled_from([1.5, 2.0, 3.0, 4.0])
# random f-relative likelihoods, bounded so that f * r stays comfortably representable
ratios = arrays(np.float64, (G64.points,), elements=st.floats(0.0, 5.0, allow_nan=False))


def density(r, grid=G64):
    return GridDensity(grid, F(grid.nodes) * r)


def test_exponent_pair():
    e = ExponentPair.from_q(3.0)
    assert e.p == 1.5 and e.dual() == ExponentPair(1.5, 3.0)
    assert ExponentPair.from_q(2.0).p == 2.0
    with pytest.raises(DomainError, match="q > 1"):
        ExponentPair.from_q(1.0)
    with pytest.raises(DomainError):
        ExponentPair(3.0, 2.0)


@given(st.floats(1.0001, 50.0))
def test_exponents_are_conjugate(q):
    e = ExponentPair.from_q(q)
    assert abs(e.q + e.p - e.q * e.p) <= 1e-12 * e.q * e.p


def test_grid_layout():
    g = Grid(1, 8.0, 512)
    assert g.spacing == pytest.approx(16.0 / 511)
    assert np.all(np.diff(g.axis) > 0)
    np.testing.assert_array_equal(g.axis, -g.axis[::-1])
    assert g.weights.sum() == pytest.approx(16.0)
    g2 = Grid(2, 3.0, 20)
    assert g2.nodes.shape == (400, 2) and g2.weights.sum() == pytest.approx(36.0)
    with pytest.raises(ValueError):
        Grid(1, 8.0, 15)
    with pytest.raises(ValueError):
        Grid(3, 8.0, 32)


def test_cell_index():
    g = Grid(1, 1.0, 21)
    assert g.cell_index([[0.0]])[0] == 10
    assert g.cell_index([[1.0]])[0] == 20
    assert g.cell_index([[-1.0]])[0] == 0
    assert g.cell_index([[1.01]])[0] == -1


def test_grid_density_rules():
    with pytest.raises(DomainError):
        GridDensity(G64, -np.ones(64))
    with pytest.raises(GridMismatchError):
        GridDensity(G64, np.ones(10))
    h = GridDensity(G64, np.ones(64))
    with pytest.raises(ValueError):
        h.values[0] = 2.0
    assert GridDensity(G64, -np.ones(64), signed=True).integral() < 0


def test_norm_of_target(grid512):
    f = GridDensity.of_target(grid512, F)
    assert abs(f.integral() - SQRT_2PI) <= 1e-6
    for q in (1.5, 2.0, 3.0, 4.0):
        assert abs(norm(f, F, q) ** q - f.integral()) <= 1e-12


def test_norm_zero_and_homogeneity(grid512):
    assert norm(GridDensity(grid512, np.zeros(512)), F, 2.0) == 0.0
    f = GridDensity.of_target(grid512, F)
    for q in (1.5, 2.0, 3.0):
        assert norm(f.with_values(2 * f.values), F, q) == pytest.approx(2 * norm(f, F, q), rel=1e-14)


def test_floor_violation_is_domain_error():
    g = Grid(1, 60.0, 64)
    h = GridDensity(g, np.ones(64))
    with pytest.raises(DomainError):
        norm(h, F, 2.0)


def test_pairing_identities(grid512, h_uniform):
    f = GridDensity.of_target(grid512, F)
    assert abs(pairing(h_uniform, f, F) - h_uniform.integral()) <= 1e-10
    assert abs(pairing(f, f, F) - f.integral()) <= 1e-10
    with pytest.raises(GridMismatchError):
        pairing(h_uniform, GridDensity.of_target(G64, F), F)


def test_holder_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b = density(rng.uniform(0, 3, 64)), density(rng.uniform(0, 3, 64))
        for q in (1.5, 2.0, 3.0):
            e = ExponentPair.from_q(q)
            assert pairing(a, b, F) <= norm(a, F, e) * norm(b, F, e.dual()) * (1 + 1e-12)


@given(ratios, exponent)
def test_holder_equality_at_conjugate(r, q):
    a = density(r)
    e = ExponentPair.from_q(q)
    lhs = pairing(a, conjugate(a, F, e), F)
    rhs = norm(a, F, e) * norm(conjugate(a, F, e), F, e.dual())
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-300)


@given(ratios, exponent)
def test_conjugacy_triple_identity(r, q):
    h = density(r)
    e = ExponentPair.from_q(q)
    hs = conjugate(h, F, e)
    nq = norm(h, F, e) ** e.q
    assert pairing(h, hs, F) == pytest.approx(nq, rel=1e-9, abs=1e-300)
    assert norm(hs, F, e.dual()) ** e.p == pytest.approx(nq, rel=1e-9, abs=1e-300)


@given(ratios)
def test_double_conjugation(r):
    h = density(r)
    back = conjugate(conjugate(h, F, 3.0), F, 1.5)
    assert np.max(np.abs(back.values - h.values)) <= 1e-10


def test_conjugate_special_cases(h_uniform, grid512):
    assert conjugate(h_uniform, F, 2.0) is h_uniform
    f = GridDensity.of_target(grid512, F)
    for q in (1.5, 3.0, 4.0):
        np.testing.assert_allclose(conjugate(f, F, q).values, f.values, rtol=1e-14)


@given(ratios, st.floats(0.01, 100.0), exponent)
def test_norm_homogeneous(r, c, q):
    h = density(r)
    assert norm(h.with_values(c * h.values), F, q) == pytest.approx(c * norm(h, F, q), rel=1e-12, abs=1e-300)


def test_alpha(grid512, h_uniform):
    f = GridDensity.of_target(grid512, F)
    assert alpha(f, F) == pytest.approx(1.0, abs=1e-15)
    assert alpha(f.with_values(3 * f.values), F) == pytest.approx(3.0, abs=1e-14)
    assert abs(alpha(h_uniform, F) - ALPHA_UNIFORM) <= 1e-4
    assert h_uniform.integral() == pytest.approx(2.0, abs=1e-13)


@pytest.mark.parametrize("points", [64, 100, 511, 2001])
def test_box_indicator_mass(points):
    g = Grid(1, 8.0, points)
    assert box_indicator(g, -1.0, 1.0).integral() == pytest.approx(2.0, abs=1e-12)
    assert box_indicator(g, -0.3, 2.45).integral() == pytest.approx(2.75, abs=1e-12)
    g2 = Grid(2, 3.0, 33)
    assert box_indicator(g2, -1.0, 0.5).integral() == pytest.approx(2.25, abs=1e-12)


def test_refinement_is_second_order():
    # smooth h = f (1 + 0.5 tanh q); the error of ||h||_3 falls by ~4 per doubling
    def nrm(n):
        g = Grid(1, 8.0, n)
        return norm(GridDensity.from_function(g, lambda x: F(x) * (1 + 0.5 * np.tanh(x[:, 0]))), F, 3.0)
    ref = nrm(8193)
    errs = [abs(nrm(n) - ref) for n in (33, 65, 129)]
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_likelihood_batches():
    fv = F(G64.nodes)
    vals = np.stack([fv, 2 * fv], axis=1)
    np.testing.assert_allclose(likelihood(vals, fv), np.tile([1.0, 2.0], (64, 1)))


def test_round_trip(tmp_path):
    h = GridDensity(Grid(2, 3.0, 16), np.random.default_rng(3).uniform(0, 1, 256))
    write_grid_density(tmp_path / "h.txt", h)
    back = read_grid_density(tmp_path / "h.txt")
    assert back.grid == h.grid
    np.testing.assert_array_equal(back.values, h.values)


def test_double_well_box_has_no_floor_issue():
    g = Grid(1, 3.0, 256)
    f = double_well()
    assert np.all(f(g.nodes) > 1e-300)
    assert norm(GridDensity.of_target(g, f), f, 2.0) > 0
