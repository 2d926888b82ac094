import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lqhmc.densities import SkewNormalMomentum, StandardNormalMomentum, StudentMomentum, double_well, standard_gaussian
from lqhmc.errors import GridMismatchError, SizeGuardError
from lqhmc.lq_space import Grid, GridDensity, alpha, norm, pairing
from lqhmc.phase_flow import ExactGaussianRotation, HamiltonianEnergy, Leapfrog
from lqhmc.transfer_op import (SymmetrizedOperator, TransferOperator, apply_S, apply_T, apply_T_adjoint,
                               assemble_matrix, coverage_occupancy, read_operator_matrix, self_adjoint_view)

from conftest import uniform_on

F = standard_gaussian()
G128 = Grid(1, 8.0, 128)
OP128 = TransferOperator(ExactGaussianRotation(1.0), G128)
ratios = arrays(np.float64, (128,), elements=st.floats(0.0, 4.0, allow_nan=False))


def rel_l2(a, b, fv, w):
    return np.sqrt(np.dot(w, (a - b) ** 2 / fv)) / np.sqrt(np.dot(w, b ** 2 / fv))


def smooth_densities(grid):
    x = grid.nodes[:, 0]
    fv = F(grid.nodes)
    return [
        uniform_on(grid),
        uniform_on(grid, -0.5, 2.0),
        GridDensity(grid, np.exp(-(x - 1.0) ** 2 / 0.5)),
        GridDensity(grid, fv * (1 + 0.8 * np.sin(2 * x))),
        GridDensity(grid, np.exp(-np.abs(x + 2.0))),
    ]


@pytest.mark.parametrize("scheme", ["aligned", "interpolated"])
def test_fixed_point(grid512, scheme):
    op = TransferOperator(ExactGaussianRotation(1.0), grid512, scheme=scheme)
    fv = op.f_values
    assert np.max(np.abs(op.apply_values(fv) - fv)) <= 1e-8
    assert op.fixed_point_residual() <= 1e-8


def test_interpolated_scheme_uses_gauss_hermite(grid512):
    op = TransferOperator(ExactGaussianRotation(1.0), grid512, scheme="interpolated")
    assert op.describe()["quadrature_nodes"] == StandardNormalMomentum().default_nodes


def test_one_step_collapse(op_quarter, grid512):
    fv = op_quarter.f_values
    for h in smooth_densities(grid512):
        th = op_quarter.apply(h).values
        a = alpha(h, F)
        assert np.max(np.abs(th - a * fv)) <= 1e-6


def test_matrix_oracle_quarter_pi(grid512):
    op = TransferOperator(ExactGaussianRotation(np.pi / 4), grid512)
    M = assemble_matrix(op)
    h = uniform_on(grid512)
    np.testing.assert_allclose(apply_T(op, h).values, M @ h.values, rtol=0, atol=1e-10)


def test_adjoint_fixes_target(op_mixing):
    fv = op_mixing.f_values
    assert np.max(np.abs(apply_T_adjoint(op_mixing, GridDensity(op_mixing.grid, fv)).values - fv)) <= 1e-8


@pytest.mark.parametrize("t", [0.4, 1.0, 2.0, np.pi])
def test_duality_random_pairs(grid512, t):
    op = TransferOperator(ExactGaussianRotation(t), grid512)
    rng = np.random.default_rng(7)
    fv = op.f_values
    worst = 0.0
    for _ in range(100):
        h = GridDensity(grid512, fv * rng.uniform(0, 2, 512))
        k = GridDensity(grid512, fv * rng.uniform(0, 2, 512))
        lhs = pairing(op.apply(h), k, F)
        rhs = pairing(h, op.apply_adjoint(k), F)
        worst = max(worst, abs(lhs - rhs) / (norm(h, F, 2.0) * norm(k, F, 2.0)))
    assert worst <= 1e-7


def test_even_momentum_self_adjoint(op_mixing):
    assert op_mixing.is_self_adjoint
    M, Md = assemble_matrix(op_mixing), assemble_matrix(op_mixing.adjoint)
    assert np.max(np.abs(M.matrix - Md.matrix)) <= 1e-8
    assert np.linalg.norm(M.symmetric_form() - Md.symmetric_form(), 2) <= 1e-7


def test_adjoint_is_cached_and_linked(op_mixing):
    adj = op_mixing.adjoint
    assert adj is op_mixing.adjoint and adj.adjoint is op_mixing


def skew_operator():
    energy = HamiltonianEnergy(F, SkewNormalMomentum())
    return TransferOperator(Leapfrog(energy, 1.0, 20), G128)


def test_skew_momentum_is_not_self_adjoint():
    op = skew_operator()
    assert not op.is_self_adjoint
    M, Md = assemble_matrix(op), assemble_matrix(op.adjoint)
    assert np.linalg.norm(M.symmetric_form() - Md.symmetric_form(), 2) > 1e-3
    assert isinstance(self_adjoint_view(op), SymmetrizedOperator)
    assert self_adjoint_view(OP128) is OP128


def test_symmetrised_operator():
    # the discrete transpose tracks the true adjoint once the momentum rule
    # is finer than the position grid
    energy = HamiltonianEnergy(F, SkewNormalMomentum())
    op = TransferOperator(Leapfrog(energy, 1.0, 20), Grid(1, 8.0, 256), momentum_nodes=1601)
    S = SymmetrizedOperator(op)
    rng = np.random.default_rng(8)
    # leapfrog fixes f only to O(eps^2); the symmetrised residual inherits it
    assert S.fixed_point_residual() <= 2 * op.fixed_point_residual() + 1e-12
    exact = SymmetrizedOperator(OP128)
    assert np.max(np.abs(exact.apply_values(OP128.f_values) - OP128.f_values)) <= 1e-7
    for _ in range(20):
        h = GridDensity(G128, OP128.f_values * rng.uniform(0, 2, 128))
        k = GridDensity(G128, OP128.f_values * rng.uniform(0, 2, 128))
        assert abs(pairing(exact.apply(h), k, F) - pairing(h, exact.apply(k), F)) <= 1e-7
        for q in (1.5, 2.0, 3.0):
            assert norm(apply_S(OP128, h), F, q) <= norm(OP128.apply(h), F, q) + 1e-12
            assert norm(OP128.apply(h), F, q) <= norm(h, F, q) + 1e-12
    M = assemble_matrix(S)
    assert np.linalg.norm(M.symmetric_form() - M.symmetric_form().T, 2) <= 1e-7


def test_full_period_identity(grid128):
    op = TransferOperator(ExactGaussianRotation(2 * np.pi), grid128)
    assert np.max(np.abs(assemble_matrix(op).matrix - np.eye(128))) <= 1e-6


def test_leading_eigenpair(op_mixing):
    M = assemble_matrix(op_mixing)
    vals, vecs = np.linalg.eig(M.matrix)
    k = np.argmax(np.abs(vals))
    assert abs(vals[k] - 1.0) <= 1e-6
    v = np.real(vecs[:, k])
    fv = op_mixing.f_values
    assert abs(v @ fv) / (np.linalg.norm(v) * np.linalg.norm(fv)) >= 1 - 1e-8


def test_power_iteration_oracle(op_mixing):
    # plain power iteration on the matrix converges to the fixed ray
    M = assemble_matrix(op_mixing).matrix
    v = np.random.default_rng(0).uniform(0.1, 1.0, 512)
    for _ in range(200):
        v = M @ v
        v /= np.linalg.norm(v)
    fv = op_mixing.f_values
    assert abs(v @ fv) / np.linalg.norm(fv) >= 1 - 1e-8


def test_strict_contraction_on_zero_mass(grid512):
    op = TransferOperator(ExactGaussianRotation(np.pi / 4), grid512)
    sv = assemble_matrix(op).singular_values()
    assert abs(sv[0] - 1.0) <= 1e-10
    assert sv[1] < 1.0
    assert sv[1] == pytest.approx(np.cos(np.pi / 4), abs=1e-6)


@given(ratios, ratios, st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
def test_linearity(r1, r2, a, b):
    fv = OP128.f_values
    lhs = OP128.apply_values(a * fv * r1 + b * fv * r2)
    rhs = a * OP128.apply_values(fv * r1) + b * OP128.apply_values(fv * r2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * (1 + np.max(np.abs(lhs)))


@given(ratios)
def test_positivity(r):
    th = OP128.apply_values(OP128.f_values * r)
    assert np.all(th >= -1e-15 * np.max(np.abs(th), initial=1.0))


@given(ratios, ratios)
def test_monotonicity(r1, r2):
    fv = OP128.f_values
    lo, hi = np.minimum(r1, r2), np.maximum(r1, r2)
    d = OP128.apply_values(fv * hi) - OP128.apply_values(fv * lo)
    assert np.all(d >= -1e-14)


@given(ratios, st.sampled_from([1.5, 2.0, 3.0, 4.0]))
def test_contraction_property(r, q):
    h = GridDensity(G128, OP128.f_values * r)
    assert norm(OP128.apply(h), F, q) <= norm(h, F, q) * (1 + 1e-12) + 1e-300


def test_resonant_is_reflection(op_resonant, grid512):
    h = GridDensity(grid512, np.exp(-(grid512.nodes[:, 0] - 1.0) ** 2))
    np.testing.assert_allclose(op_resonant.apply(h).values, h.values[::-1], atol=1e-14)


def test_schemes_agree(grid512):
    a = TransferOperator(ExactGaussianRotation(1.0), grid512, scheme="aligned")
    b = TransferOperator(ExactGaussianRotation(1.0), grid512, scheme="interpolated")
    h = GridDensity(grid512, np.exp(-(grid512.nodes[:, 0] - 1.0) ** 2))
    diff = a.apply_values(h.values) - b.apply_values(h.values)
    assert np.dot(grid512.weights, np.abs(diff)) <= 1e-3


@pytest.mark.parametrize("g", [StandardNormalMomentum(), StudentMomentum()], ids=["normal", "student"])
def test_leapfrog_fixed_point_defect_is_second_order(g):
    grid = Grid(1, 3.0, 256)
    energy = HamiltonianEnergy(double_well(), g)
    coarse = TransferOperator(Leapfrog(energy, 1.0, 20), grid).fixed_point_residual()
    fine = TransferOperator(Leapfrog(energy, 1.0, 40), grid).fixed_point_residual()
    assert 3.5 <= coarse / fine <= 4.5


def test_two_dimensional_operator():
    grid = Grid(2, 8.0, 48)
    op = TransferOperator(ExactGaussianRotation(1.0, dim=2), grid)
    fv = op.f_values
    assert op.fixed_point_residual() <= 1e-8
    h = uniform_on(grid, -1.0, 1.5)
    assert abs(op.apply(h).integral() - h.integral()) <= 1e-6 * h.integral()
    op_q = TransferOperator(ExactGaussianRotation(np.pi / 2, dim=2), grid)
    assert np.max(np.abs(op_q.apply(h).values - alpha(h, op.target) * fv)) <= 1e-6


def test_size_guard():
    op = TransferOperator(ExactGaussianRotation(1.0, dim=2), Grid(2, 8.0, 150))
    with pytest.raises(SizeGuardError):
        assemble_matrix(op)


def test_grid_mismatch():
    with pytest.raises(GridMismatchError):
        TransferOperator(ExactGaussianRotation(1.0), Grid(2, 8.0, 32))


def test_matrix_round_trip(tmp_path):
    M = assemble_matrix(OP128)
    M.write(tmp_path / "m.txt")
    back = read_operator_matrix(tmp_path / "m.txt", F)
    assert back.grid == G128
    np.testing.assert_array_equal(back.matrix, M.matrix)


def test_coverage(grid512):
    assert coverage_occupancy(ExactGaussianRotation(1.0), grid512).full
    res = coverage_occupancy(ExactGaussianRotation(np.pi), grid512)
    assert res.min_occupancy == pytest.approx(1 / 512)
    assert coverage_occupancy(ExactGaussianRotation(2 * np.pi), grid512).min_occupancy == pytest.approx(1 / 512)
