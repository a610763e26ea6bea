import numpy as np
import pytest

from waveprobe import geometry as G
from waveprobe import wave_solver as W
from waveprobe.errors import CFLError, CompatibilityError, SmallnessError


def _bump(t, c, w):
    r = (np.asarray(t) - c) / w
    out = np.zeros_like(r, dtype=float)
    inside = np.abs(r) < 1
    out[inside] = np.exp(1 - 1 / (1 - r[inside] ** 2))
    return out


@pytest.fixture
def line():
    dom = G.Domain(2.0, [(0.0, 1.0)])
    return G.minkowski(1), W.SpacetimeGrid.for_metric(dom, 128, G.minkowski(1))


def test_cfl_violation_raises():
    dom = G.Domain(1.0, [(0.0, 1.0)])
    grid = W.SpacetimeGrid(dom, 10, (64,))
    with pytest.raises(CFLError):
        grid.check_cfl(G.minkowski(1))


def test_cfl_uses_largest_speed():
    m = G.perturbed_beta(1, 0.5)
    dom = G.Domain(1.0, [(0.0, 1.0)])
    grid = W.SpacetimeGrid.for_metric(dom, 64, m, cfl=0.9)
    assert grid.cfl_number(m) <= 0.9 + 1e-12
    assert grid.light_speed(m) == pytest.approx(np.sqrt(1.5), rel=1e-12)


def test_zero_data_gives_zero(line):
    m, grid = line
    u = W.solve_linear(m, None, np.zeros((grid.nt + 1, grid.sigma.size)), None, None, grid)
    assert np.all(u.values == 0)


def test_incompatible_data_rejected(line):
    m, grid = line
    f = np.ones((grid.nt + 1, grid.sigma.size))
    with pytest.raises(CompatibilityError):
        W.solve_linear(m, None, f, None, None, grid)


def test_compatibility_reports_failing_order(line):
    m, grid = line
    t = grid.t[:, None] * np.ones(grid.sigma.size)
    res = W.compatibility_check(W.LateralBoundaryData(grid, t))
    assert not res and res.failing_order == 1


def test_travelling_wave_and_dn_map():
    # u = phi(t - x) enters at x = 0 and leaves at x = 1 without reflection
    m = G.minkowski(1)
    dom = G.Domain(2.0, [(0.0, 1.0)])
    phi = lambda s: _bump(s, 0.6, 0.3)
    dphi = lambda s, h=1e-6: (phi(s + h) - phi(s - h)) / (2 * h)
    sol_err, dn_err = [], []
    for nx in (128, 256):
        grid = W.SpacetimeGrid.for_metric(dom, nx, m)
        P = grid.sigma_points()
        u = W.solve_linear(m, None, phi(P[..., 0] - P[..., 1]), None, None, grid)
        exact = phi(grid.points()[..., 0] - grid.points()[..., 1])
        sol_err.append(np.max(np.abs(u.values - exact)))
        # outward derivative at the inflow face x = 0 is -u_x = phi'(t); at the
        # outflow face the scheme's phase lag against the exact data dominates
        left = grid.sigma.side == -1
        dn = W.normal_derivative(m, u.values, grid)
        dn_err.append(np.max(np.abs(dn[:, left] - dphi(P[:, left, 0]))))
    assert sol_err[0] < 2e-2 and sol_err[0] / sol_err[1] > 3.0
    assert dn_err[0] < 0.05 * 7.2 and dn_err[0] / dn_err[1] > 3.0


def test_manufactured_second_order():
    m = G.minkowski(2)
    dom = G.Domain(1.0, [(0.0, 1.0), (0.0, 1.0)])
    errs = []
    for nx in (16, 32):
        grid = W.SpacetimeGrid.for_metric(dom, nx, m)
        P = grid.points()
        spatial = np.sin(np.pi * P[..., 1]) * np.sin(np.pi * P[..., 2])
        exact = np.sin(P[..., 0]) * spatial
        F = (1 - 2 * np.pi**2) * exact
        u = W.solve_linear(m, F, np.zeros((grid.nt + 1, grid.sigma.size)), None, spatial[0], grid)
        errs.append(np.max(np.abs(u.values - exact)))
    assert 3.5 <= errs[0] / errs[1] <= 4.5


def test_backward_solve_vanishes_at_final_time(line):
    m, grid = line
    P = grid.sigma_points()
    f = _bump(P[..., 0], 1.0, 0.4) * (P[..., 1] == 0)
    v = W.solve_linear_backward(m, f, grid)
    assert np.max(np.abs(v.values[-2:])) == 0
    assert np.max(np.abs(v.values)) > 0.5


def test_discrete_residual_is_zero_for_scheme_output(line):
    m, grid = line
    P = grid.sigma_points()
    f = _bump(P[..., 0], 0.8, 0.4)
    u = W.solve_linear(m, None, f, None, None, grid)
    r = W.discrete_residual(m, u, None, grid)
    assert np.max(np.abs(r.values)) < 1e-9


def test_energy_conserved_without_boundary_forcing():
    m = G.minkowski(1)
    dom = G.Domain(2.0, [(0.0, 1.0)])
    grid = W.SpacetimeGrid.for_metric(dom, 256, m)
    x = grid.axes[0]
    u0 = np.sin(np.pi * x)
    u = W.solve_linear(m, None, np.zeros((grid.nt + 1, grid.sigma.size)), u0, None, grid, check=False)
    ut = np.gradient(u.values, grid.dt, axis=0)
    ux = np.gradient(u.values, grid.dx[0], axis=1)
    E = np.trapezoid(ut**2 + ux**2, x, axis=1)
    assert np.ptp(E[2:-2]) / E[2] < 1e-2


def test_semilinear_picard_and_split(line):
    m, grid = line
    P = grid.sigma_points()
    f = W.LateralBoundaryData(grid, _bump(P[..., 0], 0.8, 0.4))
    f = f * (1e-2 / W.boundary_norm(m, f))
    q = np.ones(grid.shape)
    u, rep = W.solve_semilinear(m, q, 4, f, grid, kappa=None)
    assert rep.iterations <= 10 and rep.residual <= 1e-10
    lin = W.solve_linear(m, None, f, None, None, grid)
    np.testing.assert_allclose(u.values - u.nonlinear, lin.values, atol=1e-15)
    # the nonlinear part is of size ||f||^4
    assert 0 < np.max(np.abs(u.nonlinear)) < 1e-6


def test_smallness_threshold(line):
    m, grid = line
    P = grid.sigma_points()
    f = W.LateralBoundaryData(grid, _bump(P[..., 0], 0.8, 0.4))
    with pytest.raises(SmallnessError):
        W.solve_semilinear(m, 1.0, 4, f, grid, kappa=1e-3)


def test_dn_map_with_zero_potential_is_linear(line):
    m, grid = line
    P = grid.sigma_points()
    f = W.LateralBoundaryData(grid, 1e-3 * _bump(P[..., 0], 0.8, 0.4))
    a = W.dn_map(m, 0.0, 4, f, grid, kappa=None)
    b = W.dn_map(m, 0.0, 4, f * 2.0, grid, kappa=None)
    np.testing.assert_allclose(b.values, 2 * a.values, rtol=0, atol=1e-14)
    assert np.all(a.nonlinear == 0)


def test_integrate_constant():
    m = G.minkowski(2)
    dom = G.Domain(1.5, [(0.0, 1.0), (0.0, 2.0)])
    grid = W.SpacetimeGrid.for_metric(dom, 16, m)
    assert W.integrate(m, grid, np.ones(grid.shape)) == pytest.approx(3.0, rel=1e-12)
    # lateral boundary has length 2*2 + 2*1 per unit time
    sig = np.ones((grid.nt + 1, grid.sigma.size))
    assert W.integrate_sigma(m, grid, sig) == pytest.approx(1.5 * 6.0, rel=1e-12)


def test_energy_norm_orders():
    m = G.minkowski(1)
    dom = G.Domain(1.0, [(0.0, 1.0)])
    grid = W.SpacetimeGrid.for_metric(dom, 64, m)
    u = W.ScalarField(grid, np.ones(grid.shape))
    assert W.energy_norm(u, 0) == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(ValueError):
        W.energy_norm(u, 3)
