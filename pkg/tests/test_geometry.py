import numpy as np
import pytest

from waveprobe import geometry as G
from waveprobe.errors import (
    DegenerateIntersectionError,
    GeodesicError,
    IntersectionBoundError,
)


def test_minkowski_christoffel_vanishes():
    m = G.minkowski(2)
    assert np.all(G.christoffel(m, (0.3, 0.1, 0.2)) == 0)


def test_perturbed_beta_christoffel_closed_form():
    # g = -(1 + c x^2) dt^2 + dx^2
    c, x = 0.1, 0.7
    gam = G.christoffel(G.perturbed_beta(1, c), (0.5, x))
    beta = 1 + c * x * x
    assert gam[0, 0, 1] == pytest.approx(c * x / beta, rel=1e-6)
    assert gam[0, 1, 0] == pytest.approx(c * x / beta, rel=1e-6)
    assert gam[1, 0, 0] == pytest.approx(c * x, rel=1e-6)
    assert abs(gam[1, 1, 1]) < 1e-12


def test_time_dependent_h_christoffel_closed_form():
    # g = -dt^2 + (1 + c t) dx^2
    c, t = 0.1, 1.2
    gam = G.christoffel(G.time_dependent_h(1, c), (t, 0.4))
    assert gam[0, 1, 1] == pytest.approx(c / 2, rel=1e-6)
    assert gam[1, 0, 1] == pytest.approx(c / (2 * (1 + c * t)), rel=1e-6)


def test_null_vector_is_null():
    m = G.perturbed_beta(2, 0.1)
    p = (1.0, 0.3, 0.6)
    v = G.null_vector(m, p, np.array([1.0, 2.0]))
    assert abs(G.inner(m, p, v, v)) < 1e-13
    assert v[0] == 1.0


def test_minkowski_null_geodesic_is_straight():
    m = G.minkowski(1)
    dom = G.Domain(3.0, [(0.0, 1.0)])
    path = G.integrate_geodesic(m, (1.0, 0.5), np.array([1.0, 1.0]), 5.0, domain=dom, s_min=-5.0)
    assert path.causal_type == "null"
    np.testing.assert_allclose(path.points[:, 1] - path.points[:, 0], -0.5, atol=1e-10)
    assert path.exit_face == "x1+"
    assert path.exit_event.t == pytest.approx(1.5, abs=1e-9)
    assert path.entry_face == "x1-"
    assert path.entry_event.t == pytest.approx(0.5, abs=1e-9)


def test_curved_null_geodesic_stays_null():
    m = G.perturbed_beta(1, 0.1)
    dom = G.Domain(3.0, [(0.0, 1.0)])
    v = G.null_vector(m, (1.0, 0.3), np.array([1.0]))
    path = G.integrate_geodesic(m, (1.0, 0.3), v, 5.0, domain=dom)
    assert path.null_drift < 1e-8


def test_spacelike_velocity_rejected():
    with pytest.raises(GeodesicError):
        G.integrate_geodesic(G.minkowski(1), (1.0, 0.5), np.array([0.5, 1.0]), 1.0)


@pytest.mark.parametrize("metric", [G.minkowski(2), G.perturbed_beta(2, 0.1), G.time_dependent_h(2, 0.1)])
def test_frame_identities(metric):
    p = (1.0, 0.3, 0.6)
    for ang in np.linspace(0, 2 * np.pi, 13):
        v = G.null_vector(metric, p, np.array([np.cos(ang), np.sin(ang)]))
        f = G.build_frame(metric, p, v)
        assert f.defect(metric) < 1e-12


def test_parallel_transport_keeps_frame():
    m = G.perturbed_beta(2, 0.1)
    dom = G.Domain(3.0, [(0.0, 1.0), (0.0, 1.0)])
    p = (1.0, 0.4, 0.5)
    v = G.null_vector(m, p, np.array([1.0, 0.3]))
    path = G.integrate_geodesic(m, p, v, 3.0, domain=dom, s_min=-3.0)
    ff = G.parallel_transport(m, path, G.build_frame(m, p, v))
    s = np.linspace(*path.s_range, 9)
    pts, vel, E = ff.evaluate(s)
    ref = G.reference_gram(3)
    for k in range(len(s)):
        gram = E[k] @ m.g(pts[k]) @ E[k].T
        assert np.max(np.abs(gram - ref)) < 1e-7


def test_fermi_chart_round_trip():
    m = G.perturbed_beta(1, 0.1)
    dom = G.Domain(3.0, [(0.0, 1.0)])
    p = (1.5, 0.5)
    v = G.null_vector(m, p, np.array([1.0]))
    path = G.integrate_geodesic(m, p, v, 3.0, domain=dom.inflated(0.5), s_min=-3.0)
    chart = G.fermi_chart(m, path, G.build_frame(m, p, v), 0.3)
    s = np.array([-0.2, 0.0, 0.3])
    y = np.array([[0.05], [-0.1], [0.2]])
    x = chart.forward(s, y)
    s2, y2, ok = chart.inverse(x)
    assert np.all(ok)
    np.testing.assert_allclose(s2, s, atol=1e-8)
    np.testing.assert_allclose(y2, y, atol=1e-8)


def test_boundary_optimal_geodesic_minkowski():
    m = G.minkowski(1)
    dom = G.Domain(3.2, [(0.0, 1.0)])
    fut = G.boundary_optimal_geodesic(m, dom, (1.6, 0.4), "future")
    past = G.boundary_optimal_geodesic(m, dom, (1.6, 0.4), "past")
    # the nearer face is reached first in both time directions
    assert fut.face == "x1-" and fut.event.t == pytest.approx(2.0, abs=1e-8)
    assert past.face == "x1-" and past.event.t == pytest.approx(1.2, abs=1e-8)
    assert fut.transversal and past.transversal


def _zigzag(crossings, T=3.0):
    t = np.linspace(0.0, T, 3001)
    wiggle = 0.5 + 0.1 * np.sin(np.pi * (crossings + 0.5) * t / T)
    return G.GeodesicPath.from_points(np.c_[t, wiggle]), G.GeodesicPath.from_points(np.c_[t, np.full_like(t, 0.5)])


def test_intersections_counts_crossings():
    a, b = _zigzag(3)
    ev = G.intersections(a, b)
    assert len(ev) == 4  # t = 0 plus three interior zeros of the sine
    assert all(abs(e.x[0] - 0.5) < 1e-6 for e in ev)


def test_intersection_cap():
    a, b = _zigzag(3)
    with pytest.raises(IntersectionBoundError):
        G.intersections(a, b, cap=3)


def test_coincident_paths_are_degenerate():
    _, b = _zigzag(1)
    with pytest.raises(DegenerateIntersectionError):
        G.intersections(b, b)


def test_grid_metric_matches_analytic(tmp_path):
    c = 0.1
    ts = np.linspace(0, 3, 13)
    xs = np.linspace(-0.5, 1.5, 21)
    lines = ["t,x1,beta,h11"]
    for t in ts:
        for x in xs:
            lines.append(f"{float(t)!r},{float(x)!r},{float(1 + c * x * x)!r},1.0")
    path = tmp_path / "metric.csv"
    path.write_text("\n".join(lines) + "\n")
    m = G.grid_metric(str(path))
    ref = G.perturbed_beta(1, c)
    p = np.array([1.3, 0.45])
    np.testing.assert_allclose(m.g(p), ref.g(p), atol=1e-5)
    np.testing.assert_allclose(G.christoffel(m, p), G.christoffel(ref, p), atol=1e-4)
