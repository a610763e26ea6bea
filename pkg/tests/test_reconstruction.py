import math
from fractions import Fraction

import numpy as np
import pytest

from waveprobe import geometry as G
from waveprobe import reconstruction as R
from waveprobe import wave_solver as W
from waveprobe.errors import IntersectionBoundError, SeparationError


# --- exponent and optimizer -------------------------------------------------


def test_sigma_exact_values():
    assert R.sigma(2, 4, 2) == Fraction(24, 655)
    assert R.sigma(2, 4, 1) == Fraction(24, 679)
    assert R.sigma(3, 5, 2) == Fraction(32, 5 * 4 * 2 * (24 - 2 + 13) + 9)


@pytest.mark.parametrize("args", [(2, 3, 1), (0, 4, 2), (1.5, 4, 1)])
def test_sigma_rejects_invalid(args):
    with pytest.raises(ValueError):
        R.sigma(*args)


def test_effective_order():
    assert R.effective_order(2, 4, 1) == pytest.approx(7 * (2 - 1 / 8 + 13 / 8))


def test_critical_point_is_stationary():
    args = (4, 2, 1, 1e-60)
    eps, tau = R.critical_point(*args)
    h = 1e-6
    f = lambda le, lt: float(R.objective(math.exp(le), math.exp(lt), 4, 2, 1, 1e-60))
    le, lt = math.log(eps), math.log(tau)
    d_eps = (f(le + h, lt) - f(le - h, lt)) / (2 * h)
    d_tau = (f(le, lt + h) - f(le, lt - h)) / (2 * h)
    scale = f(le, lt)
    assert abs(d_eps) < 1e-5 * scale and abs(d_tau) < 1e-5 * scale


def test_optimal_params_constraints():
    prm = R.optimal_params(4, 2, 1, 1e-57, M=1.0, kappa=0.9, tau0=40.0)
    assert prm.tau >= 40.0
    assert prm.constraint <= 0.9
    assert prm.eps * prm.tau ** (prm.s_hat / 7) == pytest.approx(prm.constraint)
    with pytest.raises(ValueError):
        R.optimal_params(4, 2, 1, 2.0)


def test_optimal_params_halves_kappa_when_needed():
    # a huge delta pushes tau below tau0 at kappa0 = kappa
    prm = R.optimal_params(4, 2, 1, 1e-20, tau0=40.0)
    assert prm.halvings > 0 and prm.tau >= 40.0


# --- gaussian concentration ------------------------------------------------


def test_gamma_ratio_constants():
    assert R.gamma_ratio(1) == pytest.approx(0.5642, abs=1e-4)
    assert R.gamma_ratio(2) == pytest.approx(0.8862, abs=1e-4)


def test_gaussian_average_of_constant_and_quadratic():
    one = R.C1Bump((0.0,), 50.0, 1.0)
    # inside a huge ball the bump is 1 - 2|z|^2/r^2 + ..., average of |z|^2 is d/(2 tau)
    tau = 100.0
    avg = R.gaussian_average(one, (0.0,), tau)
    assert avg == pytest.approx(1 - 2 / 50.0**2 / (2 * tau), rel=1e-8)


def test_c1_bump_norm():
    b = R.C1Bump((0.0, 0.0), 0.5, 2.0)
    # sup |grad| of a (1 - r^2/R^2)^2 is 8 a / (3 sqrt 3 R)
    assert b.c1_norm() == pytest.approx(2.0 + 8 * 2.0 / (3 * math.sqrt(3) * 0.5), rel=1e-3)


def test_concentration_bound_random_bumps():
    rng = np.random.default_rng(3)
    for d in (1, 2):
        b = R.C1Bump.random(rng, d)
        err, bound = R.concentration_check(b, np.zeros(d), 100.0)
        assert err <= bound


# --- potentials, settings, probes ------------------------------------------


def test_bump_potential():
    q = R.BumpPotential((R.GaussianBump((1.0, 0.5), 0.1, 2.0),))
    pts = np.array([[1.0, 0.5], [1.0, 0.5 + math.sqrt(0.1)]])
    np.testing.assert_allclose(q(pts), [2.0, 2.0 / math.e])
    assert q.scaled(0.5).max_abs(pts) == pytest.approx(1.0)
    assert np.all(R.BumpPotential(())(pts) == 0)


def test_probe_settings_grid_and_radius():
    st = R.ProbeSettings(nodes_per_wavelength=20, transverse_cutoff=0.9)
    dom = G.Domain(3.2, [(0.0, 1.0)])
    grid = st.grid(G.minkowski(1), dom, 80.0)
    assert grid.nx == (math.ceil(20 * 80 / (4 * math.pi)),)
    assert st.beam_radius(1) == 0.3
    assert st.beam_radius(3) == (0.3, 0.9, 0.9)
    assert R.ProbeSettings().beam_radius(2) == 0.3


@pytest.mark.parametrize("w", [[1.0], [0.6, 0.8], [0.0, 0.6, 0.8]])
def test_rotate_preserves_length(w):
    r = R._rotate(np.array(w), 0.3)
    assert np.linalg.norm(r) == pytest.approx(np.linalg.norm(w))
    if len(w) > 1:
        assert np.dot(r, w) == pytest.approx(math.cos(0.3) * np.dot(w, w))


def test_interpolate_linear_field_exactly():
    dom = G.Domain(1.0, [(0.0, 1.0), (0.0, 2.0)])
    grid = W.SpacetimeGrid.for_metric(dom, 8, G.minkowski(2))
    P = grid.points()
    f = W.ScalarField(grid, 1 + 2 * P[..., 0] - P[..., 1] + 0.5j * P[..., 2])
    p = (0.37, 0.21, 1.33)
    assert R.interpolate_at(f, p) == pytest.approx(1 + 0.74 - 0.21 + 0.665j)


def test_recovery_set_drops_points_without_boundary_hits():
    dom = G.Domain(3.2, [(0.0, 1.0)])
    pts = [(1.6, 0.5), (0.1, 0.5), (3.1, 0.5)]
    assert R.recovery_set(G.minkowski(1), dom, pts) == [(1.6, 0.5)]


def test_noise_model_norm_and_determinism():
    m = G.minkowski(1)
    grid = W.SpacetimeGrid.for_metric(G.Domain(1.0, [(0.0, 1.0)]), 16, m)
    a = R.NoiseModel(5).draw(m, grid, 1e-3, (1, 2))
    b = R.NoiseModel(5).draw(m, grid, 1e-3, (1, 2))
    c = R.NoiseModel(5).draw(m, grid, 1e-3, (1, 3))
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert math.sqrt(W.integrate_sigma(m, grid, np.abs(a) ** 2).real) == pytest.approx(1e-3)


def test_point_recovery_uses_real_part():
    r = R.PointRecovery((1.0, 0.5), 1.0, 0.9 + 0.3j, 40.0, 1e-3, 0j)
    assert r.abs_err == pytest.approx(0.1)
    assert r.complex_err == pytest.approx(abs(-0.1 + 0.3j))
    assert math.isnan(R.PointRecovery((1.0, 0.5), 1.0, 0j, 40.0, 1e-3, 0j, "failed").abs_err)


# --- separation ----------------------------------------------------------------


def test_solve_separation_recovers_planted_values():
    A = np.array([[1.0, 0.0, 0.0], [0.3 + 0.1j, 1.0, 0.0], [0.05, -0.2j, 1.0]])
    Q = np.array([0.7, -0.1, 0.25 + 0.05j])
    sol = R.solve_separation(A, A @ Q)
    np.testing.assert_allclose(sol.values, Q, atol=1e-8)
    assert not sol.flagged


def test_solve_separation_flags_ill_conditioning():
    A = np.array([[1.0, 1.0], [1.0, 1.0 + 1e-10]])
    sol = R.solve_separation(A, A @ np.array([1.0, 2.0]))
    assert sol.flagged


def test_solve_separation_rejects_singular():
    with pytest.raises((SeparationError, np.linalg.LinAlgError)):
        R.solve_separation(np.zeros((2, 2)), np.ones(2))


def test_causal_order():
    pts = [(1.6, 0.5), (1.2, 0.9), (1.6, 0.1)]
    out = [tuple(p) for p in R.causal_order(pts)]
    assert out == [(1.2, 0.9), (1.6, 0.1), (1.6, 0.5)]


def test_intersection_cap_from_reconstruction():
    t = np.linspace(0, 3, 2001)
    a = G.GeodesicPath.from_points(np.c_[t, 0.5 + 0.1 * np.sin(2.5 * np.pi * t / 3)])
    b = G.GeodesicPath.from_points(np.c_[t, np.full_like(t, 0.5)])
    assert len(R.check_intersection_cap(a, b, 3)) == 3
    with pytest.raises(IntersectionBoundError):
        R.check_intersection_cap(a, b, 2)


# --- sweep fitting -------------------------------------------------------------


def test_fit_recovers_power_law():
    d = np.logspace(-10, -4, 6)
    slope, icpt, r2, band = R._fit(d, 3.0 * d**0.25)
    assert slope == pytest.approx(0.25) and icpt == pytest.approx(math.log(3.0))
    assert r2 == pytest.approx(1.0) and band[0] <= slope <= band[1]
    assert math.isnan(R._fit([1e-3], [0.1])[0])


# --- probe bundle and calibration ---------------------------------------------


@pytest.fixture(scope="module")
def bundle_1d():
    m = G.minkowski(1)
    dom = G.Domain(3.2, [(0.0, 1.0)])
    st = R.ProbeSettings()
    grid = st.grid(m, dom, 40.0)
    return m, R.build_probe(m, dom, (1.6, 0.5), 40.0, 40.0, 4, grid, st)


def test_probe_bundle_normalization(bundle_1d):
    m, b = bundle_1d
    assert b.n == 1 and b.m == 4 and len(b.inputs) == 4
    assert R.interpolate_at(b.v0, b.p0) == pytest.approx(1.0)
    assert abs(b.vhat_value) >= R.VHAT_FLOOR
    assert b.hessian_det > R.DET_FLOOR
    # v0 has vanishing Cauchy data at the final time
    assert np.max(np.abs(b.v0.values[-2:])) == 0


def test_calibration_constant_and_literal_offset(bundle_1d):
    m, b = bundle_1d
    c = R.calibration(m, lambda p: np.ones(p.shape[:-1]), b)
    assert abs(c.ratio - 1) < 0.05
    assert c.offset == 2.0
    assert c.ratio_literal == pytest.approx(c.offset * c.ratio)
    lit = R.concentration_constant(b, "literal")
    assert R.concentration_constant(b) / lit == pytest.approx(2.0)


def test_recover_point_inverts_constant(bundle_1d):
    _, b = bundle_1d
    rhs = -0.7 * R.concentration_constant(b)
    assert R.recover_point(rhs, b) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        R.recover_point(rhs, b, m=5)
