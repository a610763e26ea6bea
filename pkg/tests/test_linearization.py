import math

import numpy as np
import pytest

from waveprobe import geometry as G
from waveprobe import linearization as L
from waveprobe import wave_solver as W
from waveprobe.errors import ProbeError


def _pulse(t, c, w):
    r = (np.asarray(t) - c) / w
    out = np.zeros_like(r, dtype=float)
    inside = np.abs(r) < 1
    out[inside] = np.exp(1 - 1 / (1 - r[inside] ** 2))
    return out


@pytest.fixture(scope="module")
def setup():
    m = G.minkowski(1)
    dom = G.Domain(3.0, [(0.0, 1.0)])
    grid = W.SpacetimeGrid.for_metric(dom, 48, m)
    P = grid.sigma_points()
    t, left = P[..., 0], (grid.sigma.side == -1)[None, :]
    inputs = [
        W.LateralBoundaryData(grid, _pulse(t, 0.7, 0.4) * left),
        W.LateralBoundaryData(grid, _pulse(t, 0.8, 0.4) * ~left),
        W.LateralBoundaryData(grid, (1 + 0.5j) * _pulse(t, 0.9, 0.5) * left),
        W.LateralBoundaryData(grid, _pulse(t, 0.75, 0.45) * ~left),
    ]
    v0 = W.solve_linear_backward(m, _pulse(t, 2.0, 0.5) * left, grid)
    x = grid.points()
    q = np.exp(-((x[..., 0] - 1.5) ** 2 + (x[..., 1] - 0.5) ** 2) / 0.2)
    return m, grid, inputs, v0, q


def test_sign_patterns():
    pats = L.sign_patterns(4)
    assert len(pats) == 16
    assert sum(s for _, s in pats) == 0
    assert dict(pats)[(1, 1, 1, 1)] == 1
    assert dict(pats)[(1, 1, 1, 0)] == -1


def test_probe_validation(setup):
    _, _, inputs, _, _ = setup
    with pytest.raises(ValueError):
        L.DnProbe(inputs[:3], 0.1, 4)
    with pytest.raises(ValueError):
        L.DnProbe(inputs, (0.1, 0.1, -0.1, 0.1), 4)


def test_zero_potential_annihilates(setup):
    m, grid, inputs, _, _ = setup
    probe = L.DnProbe(inputs, 1e-2, 4).with_linear_solutions(m)
    dn = L.DnOperator(m, np.zeros(grid.shape), 4, grid, kappa=None)
    assert np.max(np.abs(L.mixed_finite_difference(dn, probe).values)) <= 1e-10
    # summing full traces cancels O(1) numbers, so rounding is amplified by eps^-4
    full = L.mixed_finite_difference(dn, probe, split=False).values
    assert np.max(np.abs(full)) <= 1e3 * np.finfo(float).eps / 1e-2**4


def test_split_and_full_sums_agree(setup):
    m, grid, inputs, _, q = setup
    probe = L.DnProbe(inputs, 0.05, 4).with_linear_solutions(m)
    dn = L.DnOperator(m, q, 4, grid, kappa=None)
    a = L.mixed_finite_difference(dn, probe, split=True).values
    b = L.mixed_finite_difference(dn, probe, split=False).values
    assert np.max(np.abs(a - b)) < 1e-6 * np.max(np.abs(a))


def test_mixed_difference_is_permutation_symmetric(setup):
    m, grid, inputs, _, q = setup
    probe = L.DnProbe(inputs, 1e-3, 4).with_linear_solutions(m)
    dn = L.DnOperator(m, q, 4, grid, kappa=None)
    a = L.mixed_finite_difference(dn, probe).values
    b = L.mixed_finite_difference(dn, probe.permuted((2, 0, 3, 1))).values
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12 * np.max(np.abs(a)))


def test_identity_closes_and_remainder_is_cubic(setup):
    m, grid, inputs, v0, q = setup
    rems = []
    epss = (0.2, 0.1, 0.05)
    for eps in epss:
        probe = L.DnProbe(inputs, eps, 4).with_linear_solutions(m)
        ev = L.identity_evaluate(m, q, v0, probe, grid, with_expansion=True)
        rems.append(abs(ev.expansion_remainder))
    assert ev.discrepancy < 5e-2
    slope = np.polyfit(np.log(epss), np.log(rems), 1)[0]
    assert slope >= 2.7


def test_lhs_matches_direct_quadrature(setup):
    m, grid, inputs, v0, q = setup
    probe = L.DnProbe(inputs, 1e-3, 4).with_linear_solutions(m)
    ev = L.identity_evaluate(m, q, v0, probe, grid)
    prod = q * v0.values * np.prod([v.values for v in probe.linear_solutions], axis=0)
    assert ev.lhs == pytest.approx(-math.factorial(4) * W.integrate(m, grid, prod), rel=1e-12)


def test_measurement_mode(setup):
    m, grid, inputs, v0, q = setup
    probe = L.DnProbe(inputs, 1e-3, 4).with_linear_solutions(m)
    mixed = L.mixed_finite_difference(L.DnOperator(m, q, 4, grid, kappa=None), probe)
    ev = L.identity_evaluate(m, None, v0, probe, grid, mixed=mixed)
    ref = L.identity_evaluate(m, q, v0, probe, grid, mixed=mixed)
    assert math.isnan(ev.lhs.real) and ev.rhs_boundary == ref.rhs_boundary
    with pytest.raises(ValueError):
        L.identity_evaluate(m, None, v0, probe, grid)


def test_auxiliary_must_vanish_at_final_time(setup):
    m, grid, inputs, _, q = setup
    bad = W.ScalarField(grid, np.ones(grid.shape))
    with pytest.raises(ProbeError):
        L.identity_evaluate(m, q, bad, L.DnProbe(inputs, 1e-3, 4), grid)


def test_parallel_reduction_matches_serial(setup):
    m, grid, inputs, _, q = setup
    probe = L.DnProbe(inputs, 1e-3, 4).with_linear_solutions(m)
    dn = L.DnOperator(m, q, 4, grid, kappa=None)
    a = L.mixed_finite_difference(dn, probe, jobs=1).values
    b = L.mixed_finite_difference(dn, probe, jobs=2).values
    assert np.array_equal(a, b)
