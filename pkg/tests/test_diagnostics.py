import json

import numpy as np
import pytest

from lqhmc.densities import SkewNormalMomentum, standard_gaussian
from lqhmc.diagnostics import (SPECTRAL_CAVEAT, canonical_test_family, check_conjugacy_inequality,
                               estimate_spectral_gap, eventual_coverage, iterate_and_trace, property_checks,
                               random_densities, weak_convergence_probe)
from lqhmc.lq_space import Grid, GridDensity, alpha, box_indicator, norm
from lqhmc.phase_flow import HamiltonianEnergy, Leapfrog
from lqhmc.transfer_op import TransferOperator, assemble_matrix

from conftest import uniform_on

F = standard_gaussian()
EXPONENTS = [1.5, 2.0, 3.0, 4.0]


@pytest.fixture(scope="module")
def sigma(op_mixing):
    return assemble_matrix(op_mixing).singular_values()


def test_quarter_turn_trace(op_quarter, h_uniform):
    tr = iterate_and_trace(op_quarter, h_uniform, 3, EXPONENTS)
    fn = np.array([norm(GridDensity(h_uniform.grid, op_quarter.f_values), F, q) for q in EXPONENTS])
    assert np.all(tr.errors[1:] <= 1e-6 * fn)
    np.testing.assert_allclose(tr.norms[-1], tr.limit_norms, rtol=1e-7)


def test_resonant_trace_is_constant_for_even_h0(op_resonant, h_uniform):
    tr = iterate_and_trace(op_resonant, h_uniform, 20, EXPONENTS)
    assert np.max(np.ptp(tr.norms, axis=0)) <= 1e-9
    assert np.max(np.ptp(tr.errors, axis=0)) <= 1e-9


def test_resonant_trace_alternates_for_odd_part(op_resonant, grid512):
    h = uniform_on(grid512, -0.5, 1.5)
    tr = iterate_and_trace(op_resonant, h, 6, [2.0])
    # norms stay put, pairings against x f flip sign every step
    assert np.ptp(tr.norms[:, 0]) <= 1e-9
    k = tr.family.index("x*f")
    np.testing.assert_allclose(tr.pairings[1:, k], -tr.pairings[:-1, k], atol=1e-12)


def test_mixing_trace_invariants(op_mixing, h_uniform):
    tr = iterate_and_trace(op_mixing, h_uniform, 100, EXPONENTS)
    assert np.all(tr.max_norm_increase() <= 1e-9)
    assert tr.max_mass_drift() <= 1e-6
    assert tr.alpha == pytest.approx(alpha(h_uniform, F))
    np.testing.assert_allclose(tr.v_q(), tr.limit_norms ** np.array(EXPONENTS), rtol=1e-6)


def test_decay_ratio_matches_second_singular_value(op_mixing, grid512, sigma):
    # an h0 with an odd component excites the cos(t) mode
    tr = iterate_and_trace(op_mixing, uniform_on(grid512, -0.5, 1.5), 30, [2.0])
    ratio = np.median(tr.decay_ratios()[5:20])
    assert abs(ratio - sigma[1]) <= 5e-3
    assert sigma[1] == pytest.approx(np.cos(1.0), abs=1e-6)


def test_even_h0_decays_at_third_singular_value(op_mixing, h_uniform, sigma):
    # an even h0 has no component on the odd eigenvector: the rate is cos(t)^2
    tr = iterate_and_trace(op_mixing, h_uniform, 30, [2.0])
    ratio = np.median(tr.decay_ratios()[3:12])
    assert abs(ratio - sigma[2]) <= 5e-3
    assert abs(ratio - sigma[1]) > 0.2


def test_trace_csv(tmp_path, op_quarter, h_uniform):
    tr = iterate_and_trace(op_quarter, h_uniform, 2, [2.0, 3.0])
    tr.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].split(",")[:4] == ["n", "mass", "norm_q2", "norm_q3"]
    assert len(lines) == 4


def test_negative_budget(op_quarter, h_uniform):
    with pytest.raises(ValueError):
        iterate_and_trace(op_quarter, h_uniform, -1, [2.0])


@pytest.mark.parametrize("q", [1.5, 2.0, 3.0, 4.0])
@pytest.mark.parametrize("n", [1, 2, 5])
def test_conjugacy_inequality(op_mixing, h_uniform, q, n):
    rep = check_conjugacy_inequality(op_mixing, h_uniform, n, q)
    assert rep.passed
    if q == 2.0:
        assert rep.side == "equal" and rep.max_abs_difference <= 1e-10
    else:
        assert rep.side == ("lhs<=rhs" if q > 2 else "lhs>=rhs")
        assert rep.max_abs_difference > 1e-3  # strict somewhere, not a vacuous pass


def test_conjugacy_fixed_ray(op_mixing, grid512):
    f = GridDensity(grid512, op_mixing.f_values)
    for q in (1.5, 3.0, 4.0):
        assert check_conjugacy_inequality(op_mixing, f, 2, q).max_abs_difference <= 1e-8


def test_conjugacy_q3_n2_slack(op_mixing, h_uniform):
    rep = check_conjugacy_inequality(op_mixing, h_uniform, 2, 3.0)
    assert rep.max_violation <= 1e-8


def test_canonical_family(grid512):
    fam = canonical_test_family(grid512, F)
    assert len(fam) == 12
    assert [name for name, _ in fam][0] == "f"
    assert len({name for name, _ in fam}) == 12


def test_weak_probe_constant_for_target(op_mixing, h_uniform, grid512):
    fam = canonical_test_family(grid512, F)
    probe = weak_convergence_probe(op_mixing, h_uniform, fam, 20)
    assert np.ptp(probe.pairings[:, 0]) <= 1e-10 * h_uniform.integral()
    assert probe.pairings[0, 0] == pytest.approx(h_uniform.integral(), rel=1e-12)


def test_weak_probe_half_line(op_mixing, h_uniform, grid512):
    fam = canonical_test_family(grid512, F)
    probe = weak_convergence_probe(op_mixing, h_uniform, fam, 60)
    k = probe.family.index("[x>=0]*f")
    expected = alpha(h_uniform, F) * np.sqrt(2 * np.pi) / 2
    # the closed form differs from the grid value by the trapezoid error at the jump
    assert abs(probe.pairings[-1, k] - expected) <= 2e-2 * grid512.spacing
    assert abs(probe.pairings[-1, k] - probe.limits[k]) <= 1e-10


def test_weak_probe_converges_by_60(op_mixing, grid512):
    h0 = uniform_on(grid512, -0.5, 1.5)
    probe = weak_convergence_probe(op_mixing, h0, canonical_test_family(grid512, F), 60)
    assert np.max(probe.final_gap) <= 1e-5
    assert np.max(probe.transposition_residual) <= 1e-7
    assert probe.parity_gap() <= 1e-5


def test_spectral_gap_quarter_turn(op_quarter):
    rep = estimate_spectral_gap(op_quarter)
    assert abs(rep.gap - 1.0) <= 1e-6 and rep.converged
    assert rep.caveat == SPECTRAL_CAVEAT


def test_spectral_gap_resonant(op_resonant):
    rep = estimate_spectral_gap(op_resonant)
    assert abs(rep.gap) <= 1e-6


def test_spectral_gap_mixing(op_mixing, sigma):
    rep = estimate_spectral_gap(op_mixing)
    assert rep.converged
    assert abs(rep.gap - (1 - sigma[1])) <= 1e-4
    assert 0.0 <= rep.gap <= 1.0
    assert json.dumps(rep.to_dict())


def test_norm_decay_fit_other_exponent(op_mixing, grid512):
    rep = estimate_spectral_gap(op_mixing, 3.0, h0=uniform_on(grid512, -0.5, 1.5))
    assert rep.method == "norm-decay-fit"
    assert rep.rho == pytest.approx(np.cos(1.0), abs=5e-3)


def test_eventual_coverage(op_mixing, op_resonant):
    occ = eventual_coverage(op_mixing, k_max=3)
    assert np.all(np.diff(occ) > 0) and occ[0] > 0.7
    np.testing.assert_allclose(eventual_coverage(op_resonant, k_max=3), 1 / 512)


def test_random_densities_are_valid(grid128):
    dens = random_densities(grid128, F, 8, seed=3)
    assert len(dens) == 8
    assert all(np.all(d.values >= 0) for d in dens)
    again = random_densities(grid128, F, 8, seed=3)
    assert all(np.array_equal(a.values, b.values) for a, b in zip(dens, again))


def labels(rows):
    return {r.label: r for r in rows}


def test_property_checks_quarter_turn(op_quarter, h_uniform):
    rows = labels(property_checks(op_quarter, h_uniform, n_max=20, n_random=20,
                               spectral=estimate_spectral_gap(op_quarter)))
    assert all(r.status == "pass" for r in rows.values()), [r for r in rows.values() if not r.passed]
    assert "spectral-gap" in rows and "conjugacy-inequality[q=1.5]" in rows


def test_property_checks_resonant(op_resonant, h_uniform):
    rows = labels(property_checks(op_resonant, h_uniform, n_max=20, n_random=20))
    assert rows["coverage"].status == "fail"
    assert rows["contraction-strictness"].status == "n/a"
    assert rows["strong-convergence"].status == "n/a"
    assert rows["norm-contraction"].passed and rows["mass-conservation"].passed


def test_property_checks_skew_reroutes():
    energy = HamiltonianEnergy(F, SkewNormalMomentum())
    op = TransferOperator(Leapfrog(energy, 1.0, 20), Grid(1, 8.0, 128))
    h0 = box_indicator(op.grid, -1.0, 1.0)
    rows = labels(property_checks(op, h0, n_max=10, n_random=10))
    assert rows["involution-self-adjointness"].status == "n/a"
    assert "S = T* T" in rows["conjugacy-inequality[q=3]"].note
    assert "energy defect" in rows["averaging-fixed-point"].note
