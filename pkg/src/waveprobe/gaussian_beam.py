"""Gaussian beam quasimodes along null geodesics.

A beam lives in tube coordinates ``(s, y)`` around its null geodesic and has
the form ``tau^(n/2p) exp(i tau Theta) a`` with

    Theta(s, y) = y_1 + 1/2 y^T H(s) y,      a(s, y) = b(s) chi(|y| / delta).

With the lightcone normalisation ``g(e_0, e_1) = -2`` the inverse metric on
the axis has ``g^{s y_1} = -1/2`` and the second-order eikonal equation
becomes the matrix Riccati equation

    H' = D + 2 H C H,     C = diag(0, 1, ..., 1),
    D_ij = d_{y_i} d_{y_j} g^{y_1 y_1}(s, 0).

It is integrated in linear form ``H = Z Y^-1`` with ``Y' = -2 C Z``,
``Z' = D Y``, ``Y(0) = I``.  The leading transport equation on the axis,
``2 g(dTheta, db) + (box Theta) b = 0``, reduces to ``b' = tr(C H) b`` whose
solution is ``b = det(Y)^(-1/2)``.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .errors import CausticError, CauchySurfaceError, PositivityError, ProbeError, ResolutionError
from .geometry import (
    as_point,
    build_frame,
    fermi_chart,
    inner,
    integrate_geodesic,
)
from .wave_solver import (
    ScalarField,
    LateralBoundaryData,
    integrate,
    l2_norm,
    solve_linear,
    solve_linear_backward,
)

logger = logging.getLogger(__name__)

NODES_PER_WAVELENGTH = 10
D_SAMPLES = 257
FD_Y = 1e-3
FD_CHART = 1e-4


# --------------------------------------------------------------------------
# cutoff


def cutoff(r):
    """C2 bump in ``r = |y| / delta``: 1 for ``r <= 1/2``, 0 for ``r >= 1``."""
    x = np.clip(2.0 * np.asarray(r) - 1.0, 0.0, 1.0)
    return 1.0 - x**3 * (10 - 15 * x + 6 * x**2)


def _cutoff_derivs(r):
    x = np.clip(2.0 * np.asarray(r) - 1.0, 0.0, 1.0)
    d1 = -2.0 * 30 * x**2 * (1 - x) ** 2
    d2 = -4.0 * 60 * x * (1 - x) * (1 - 2 * x)
    return d1, d2


def _scaled_radius(y, radius):
    """``|y / radius|`` with a scalar or per-component radius."""
    return np.linalg.norm(y / np.asarray(radius, dtype=float), axis=-1)


def _cutoff_jet(y, radius):
    """Value, gradient and Hessian of ``chi(|y / radius|)`` in ``y``.

    ``radius`` is a scalar or one radius per chart coordinate ``y_k``.
    """
    n = y.shape[-1]
    scale = np.broadcast_to(np.asarray(radius, dtype=float), (n,))
    z = y / scale
    nz = np.linalg.norm(z, axis=-1)
    val = cutoff(nz)
    d1, d2 = _cutoff_derivs(nz)
    safe = np.where(nz > 0, nz, 1.0)
    u = z / safe[..., None]
    eye = np.eye(n)
    hz = d2[..., None, None] * u[..., :, None] * u[..., None, :] + (d1 / safe)[..., None, None] * (
        eye - u[..., :, None] * u[..., None, :]
    )
    grad = d1[..., None] * u / scale
    hess = hz / scale[:, None] / scale[None, :]
    return val, grad, hess


# --------------------------------------------------------------------------
# spec and jets


@dataclass(frozen=True, eq=False)
class BeamSpec:
    """Parameters of one beam.

    ``order`` is the nominal expansion order ``N`` used to set the decay
    target; the construction itself carries the phase to second order and
    the amplitude to leading order.
    """

    chart: object
    tau: float
    H0: np.ndarray = None
    p: int = 4
    order: int = None
    cutoff: float = None
    s0: float = 0.0

    def __post_init__(self):
        n = self.chart.n
        H0 = 1j * np.eye(n) if self.H0 is None else np.asarray(self.H0, dtype=complex).reshape(n, n)
        object.__setattr__(self, "H0", H0)
        if self.order is None:
            object.__setattr__(self, "order", 3 * (n + 1))
        if self.cutoff is None:
            object.__setattr__(self, "cutoff", self.chart.radius)
        if np.ndim(self.cutoff):
            radii = np.asarray(self.cutoff, dtype=float)
            if radii.shape != (n,) or np.any(radii <= 0):
                raise ValueError("per-coordinate cutoff radii must be positive, one per chart coordinate")
            object.__setattr__(self, "cutoff", tuple(float(r) for r in radii))
        if self.tau < 1:
            raise ValueError("beam frequency tau must be at least 1")
        if self.max_cutoff > self.chart.radius + 1e-12:
            raise ValueError("cutoff radius exceeds the chart tube radius")
        if np.min(np.linalg.eigvalsh(0.5 * (H0.imag + H0.imag.T))) <= 0:
            raise PositivityError("Im H0 must be positive definite")

    @property
    def max_cutoff(self):
        return float(np.max(self.cutoff))


def _projector(n):
    C = np.eye(n)
    C[0, 0] = 0.0
    return C


def _chart_inverse_metric(chart, s, y):
    return np.linalg.inv(chart.metric_in_chart(s, y))


def _curvature_table(chart):
    """Samples and spline of ``D(s)``; identically zero for constant metrics."""
    n = chart.n
    s = np.linspace(chart.frames.s_min, chart.frames.s_max, D_SAMPLES)
    if chart.metric.constant:
        return s, np.zeros((len(s), n, n)), None
    h = FD_Y

    def g11(yy):
        return _chart_inverse_metric(chart, s, np.broadcast_to(yy, (len(s), n)))[:, 1, 1]

    f0 = g11(np.zeros(n))
    D = np.empty((len(s), n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        D[:, i, i] = (g11(ei) - 2 * f0 + g11(-ei)) / h**2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h
            val = (g11(ei + ej) - g11(ei - ej) - g11(-ei + ej) + g11(-ei - ej)) / (4 * h * h)
            D[:, i, j] = D[:, j, i] = val
    return s, D, CubicSpline(s, D, axis=0)


@dataclass(frozen=True, eq=False)
class PhaseJet:
    """Second-order phase data ``H(s) = Z(s) Y(s)^-1`` along the axis."""

    s_samples: np.ndarray
    H_samples: np.ndarray
    Y_samples: np.ndarray
    dense: object  # s -> flattened (Y, Z)
    D_spline: object
    n: int

    def YZ(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        v = self.dense(s).T
        n = self.n
        return v[:, : n * n].reshape(-1, n, n), v[:, n * n :].reshape(-1, n, n)

    def D(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if self.D_spline is None:
            return np.zeros((len(s), self.n, self.n))
        return self.D_spline(s)

    def dD(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if self.D_spline is None:
            return np.zeros((len(s), self.n, self.n))
        return self.D_spline(s, 1)

    def H(self, s):
        Y, Z = self.YZ(s)
        return Z @ np.linalg.inv(Y)

    def derivatives(self, s):
        """``H, H', H''`` from the Riccati equation."""
        C = _projector(self.n)
        H = self.H(s)
        D = self.D(s)
        H1 = D + 2 * H @ C @ H
        H2 = self.dD(s) + 2 * (H1 @ C @ H + H @ C @ H1)
        return H, H1, H2

    def min_imag_eigenvalue(self):
        im = 0.5 * (self.H_samples.imag + np.swapaxes(self.H_samples.imag, -1, -2))
        return float(np.min(np.linalg.eigvalsh(im)))


@dataclass(frozen=True, eq=False)
class AmplitudeJet:
    """Leading amplitude ``b00(s) = det(Y(s))^(-1/2)`` on a continuous branch."""

    s_samples: np.ndarray
    Y_samples: np.ndarray
    b_samples: np.ndarray
    dense_log: object
    normalization: complex = 1.0

    def b00(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return np.exp(self.dense_log(s)[0]) * self.normalization


def solve_riccati(metric, chart, H0, rtol=1e-12):
    """Integrate the Riccati equation along the chart axis.

    Raises :class:`PositivityError` when ``Im H`` loses positivity and
    :class:`CausticError` when ``Y`` degenerates.
    """
    n = chart.n
    H0 = np.asarray(H0, dtype=complex).reshape(n, n)
    if np.min(np.linalg.eigvalsh(0.5 * (H0.imag + H0.imag.T))) <= 0:
        raise PositivityError("Im H0 must be positive definite")
    s_tab, D_tab, D_spline = _curvature_table(chart)
    C = _projector(n)

    if D_spline is None:

        def rhs(s, v):
            Z = v[n * n :].reshape(n, n)
            return np.concatenate([(-2 * C @ Z).ravel(), np.zeros(n * n, dtype=complex)])

    else:

        def rhs(s, v):
            Y = v[: n * n].reshape(n, n)
            Z = v[n * n :].reshape(n, n)
            return np.concatenate([(-2 * C @ Z).ravel(), (D_spline(s) @ Y).ravel()])

    v0 = np.concatenate([np.eye(n, dtype=complex).ravel(), H0.ravel()])
    lo, hi = chart.frames.s_min, chart.frames.s_max
    span = hi - lo
    kw = dict(method="DOP853", rtol=rtol, atol=rtol * 1e-2, dense_output=True, max_step=span / 32)
    fwd = solve_ivp(rhs, (0.0, hi), v0, **kw)
    bwd = solve_ivp(rhs, (0.0, lo), v0, **kw) if lo < 0 else None
    if fwd.status < 0 or (bwd is not None and bwd.status < 0):
        raise CausticError("Riccati integration failed")

    def dense(s):
        s = np.asarray(s, dtype=float)
        out = np.empty((2 * n * n, s.size), dtype=complex)
        pos = s >= 0
        if np.any(pos):
            out[:, pos] = fwd.sol(s[pos])
        if np.any(~pos):
            out[:, ~pos] = bwd.sol(s[~pos])
        return out

    samples = np.linspace(lo, hi, D_SAMPLES)
    vals = dense(samples).T
    Y = vals[:, : n * n].reshape(-1, n, n)
    Z = vals[:, n * n :].reshape(-1, n, n)
    detY = np.linalg.det(Y)
    if np.min(np.abs(detY)) < 1e-10:
        k = int(np.argmin(np.abs(detY)))
        raise CausticError(f"det Y vanishes near s = {samples[k]:.4g}")
    H = Z @ np.linalg.inv(Y)
    jet = PhaseJet(samples, H, Y, dense, D_spline, n)
    lam = jet.min_imag_eigenvalue()
    if lam <= 0:
        raise PositivityError(f"Im H(s) lost positivity (min eigenvalue {lam:.3g})")
    return jet


def solve_transport(metric, chart, phase, s0=0.0, rtol=1e-12):
    """Leading amplitude ``b00`` with ``b00(0) = 1``, rescaled so that ``b00(s0) = 1``."""
    n = chart.n
    C = _projector(n)

    def rhs(s, v):
        return np.array([np.trace(C @ phase.H(s)[0])], dtype=complex)

    lo, hi = chart.frames.s_min, chart.frames.s_max
    span = hi - lo
    kw = dict(method="DOP853", rtol=rtol, atol=rtol * 1e-2, dense_output=True, max_step=span / 32)
    v0 = np.zeros(1, dtype=complex)
    fwd = solve_ivp(rhs, (0.0, hi), v0, **kw)
    bwd = solve_ivp(rhs, (0.0, lo), v0, **kw) if lo < 0 else None

    def dense_log(s):
        s = np.asarray(s, dtype=float)
        out = np.empty((1, s.size), dtype=complex)
        pos = s >= 0
        if np.any(pos):
            out[:, pos] = fwd.sol(s[pos])
        if np.any(~pos):
            out[:, ~pos] = bwd.sol(s[~pos])
        return out

    samples = phase.s_samples
    b = np.exp(dense_log(samples)[0])
    norm = 1.0 / np.exp(dense_log(np.array([s0]))[0, 0])
    return AmplitudeJet(samples, phase.Y_samples, b * norm, dense_log, norm)


def transport_residual(chart, phase, amplitude, s):
    """``2 g(dTheta, db) + (box Theta) b`` on the axis at parameters ``s``."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    n = chart.n
    y = np.zeros((len(s), n))
    ginv, cvec = _operator_coefficients(chart, s, y)
    H = phase.H(s)
    C = _projector(n)
    b = amplitude.b00(s)
    db = np.einsum("kii->k", np.einsum("ij,kjl->kil", C, H)) * b
    grad_theta = np.zeros((len(s), n + 1), dtype=complex)
    grad_theta[:, 1] = 1.0
    hess_theta = np.zeros((len(s), n + 1, n + 1), dtype=complex)
    hess_theta[:, 1:, 1:] = H
    box_theta = np.einsum("kab,kab->k", ginv, hess_theta) + np.einsum("ka,ka->k", cvec, grad_theta)
    grad_b = np.zeros((len(s), n + 1), dtype=complex)
    grad_b[:, 0] = db
    return 2 * np.einsum("kab,ka,kb->k", ginv, grad_theta, grad_b) + box_theta * b


def eikonal_residual(chart, phase, s):
    """Largest entry of ``d_y d_y g(dTheta, dTheta)`` at ``(s, 0)`` (central differences)."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    n = chart.n
    H, H1, _ = phase.derivatives(s)
    h = FD_Y

    def G(yv):
        y = np.broadcast_to(yv, (len(s), n))
        ginv = _chart_inverse_metric(chart, s, y)
        grad = np.zeros((len(s), n + 1), dtype=complex)
        grad[:, 0] = 0.5 * np.einsum("ki,kij,kj->k", y, H1, y)
        grad[:, 1:] = np.einsum("kij,kj->ki", H, y)
        grad[:, 1] += 1.0
        return np.einsum("kab,ka,kb->k", ginv, grad, grad)

    f0 = G(np.zeros(n))
    worst = np.zeros(len(s))
    for i in range(n):
        for j in range(i, n):
            ei = np.zeros(n)
            ei[i] = h
            ej = np.zeros(n)
            ej[j] = h
            if i == j:
                val = (G(ei) - 2 * f0 + G(-ei)) / h**2
            else:
                val = (G(ei + ej) - G(ei - ej) - G(-ei + ej) + G(-ei - ej)) / (4 * h * h)
            worst = np.maximum(worst, np.abs(val))
    return worst


def _operator_coefficients(chart, s, y):
    """Inverse chart metric and ``c^b = d_a(sqrt|g| g^ab) / sqrt|g|`` at chart points."""
    gF = chart.metric_in_chart(s, y)
    ginv = np.linalg.inv(gF)
    if chart.metric.constant:
        return ginv, np.zeros(ginv.shape[:-1])
    n = chart.n
    h = FD_CHART
    c = np.zeros(ginv.shape[:-1])
    for a in range(n + 1):
        ds = np.zeros(n + 1)
        ds[a] = h
        vals = []
        for sgn in (1, -1):
            ss = s + sgn * ds[0]
            yy = y + sgn * ds[1:]
            g = chart.metric_in_chart(ss, yy)
            vals.append(np.sqrt(np.abs(np.linalg.det(g)))[..., None] * np.linalg.inv(g)[..., a, :])
        c += (vals[0] - vals[1]) / (2 * h)
    sg = np.sqrt(np.abs(np.linalg.det(gF)))
    return ginv, c / sg[..., None]


# --------------------------------------------------------------------------
# beams


@dataclass(frozen=True, eq=False)
class Beam:
    """Gaussian beam ``tau^(n/2p) exp(i tau Theta) a`` (optionally conjugated)."""

    spec: BeamSpec
    phase: PhaseJet
    amplitude: AmplitudeJet
    conjugated: bool = False
    factor: complex = 1.0
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def chart(self):
        return self.spec.chart

    @property
    def metric(self):
        return self.spec.chart.metric

    @property
    def tau(self):
        return self.spec.tau

    @property
    def n(self):
        return self.spec.chart.n

    @property
    def prefactor(self):
        return self.spec.tau ** (self.n / (2 * self.spec.p))

    def scaled(self, c):
        return replace(self, factor=self.factor * c)

    def coordinates(self, points):
        """Chart coordinates of points; only points near the tube are inverted."""
        pts = np.asarray(points, dtype=float)
        flat = pts.reshape(-1, pts.shape[-1])
        chart = self.chart
        key = ("axis-reach",)
        if key not in self._cache:
            grid_s = np.linspace(chart.frames.s_min, chart.frames.s_max, 2049)
            axis_pts, _, E = chart.frames.evaluate(grid_s)
            spacing = float(np.max(np.linalg.norm(np.diff(axis_pts, axis=0), axis=-1)))
            reach = float(np.max(np.linalg.norm(E[:, 1:, :], axis=-1)))
            self._cache[key] = (spacing, reach)
        spacing, reach = self._cache[key]
        tree, s_grid = chart._axis_tree()
        bound = 2.0 * reach * self.spec.max_cutoff + spacing
        dist, idx = tree.query(flat, distance_upper_bound=bound, workers=-1)
        near = dist < bound
        s = np.full(flat.shape[0], np.nan)
        y = np.full((flat.shape[0], self.n), np.nan)
        inside = np.zeros(flat.shape[0], dtype=bool)
        if np.any(near):
            ss, yy, ok = chart.inverse(flat[near], s_guess=s_grid[idx[near]])
            s[near], y[near], inside[near] = ss, yy, ok
        inside &= _scaled_radius(np.where(np.isnan(y), np.inf, y), self.spec.cutoff) < 1.0
        shape = pts.shape[:-1]
        return s.reshape(shape), y.reshape(shape + (self.n,)), inside.reshape(shape)

    def _local(self, s, y):
        H = self.phase.H(s)
        theta = y[:, 0] + 0.5 * np.einsum("ki,kij,kj->k", y, H, y)
        amp = self.amplitude.b00(s) * cutoff(_scaled_radius(y, self.spec.cutoff))
        return theta, amp

    def evaluate_chart(self, s, y):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        y = np.asarray(y, dtype=float).reshape(len(s), self.n)
        theta, amp = self._local(s, y)
        v = self.prefactor * np.exp(1j * self.tau * theta) * amp
        return self.factor * (np.conj(v) if self.conjugated else v)

    def evaluate(self, points):
        """Beam values at events (zero outside the tube)."""
        pts = np.asarray(points, dtype=float)
        s, y, inside = self.coordinates(pts)
        out = np.zeros(inside.shape, dtype=complex)
        if np.any(inside):
            out[inside] = self.evaluate_chart(s[inside], y[inside])
        return out

    def __call__(self, points):
        return self.evaluate(points)

    def _grid_coords(self, grid):
        key = ("grid", id(grid))
        if key not in self._cache:
            self._cache[key] = (grid, self.coordinates(grid.points()))
        return self._cache[key][1]

    def on_grid(self, grid):
        s, y, inside = self._grid_coords(grid)
        vals = np.zeros(grid.shape, dtype=complex)
        if np.any(inside):
            vals[inside] = self.evaluate_chart(s[inside], y[inside])
        return ScalarField(grid, vals)

    def boundary_data(self, grid):
        return LateralBoundaryData(grid, self.evaluate(grid.sigma_points()))

    def box_chart(self, s, y):
        """Analytic ``box_g v`` at chart points."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        y = np.asarray(y, dtype=float).reshape(len(s), self.n)
        n = self.n
        C = _projector(n)
        H, H1, H2 = self.phase.derivatives(s)
        b = self.amplitude.b00(s)
        trCH = np.einsum("ii,kii->k", C, H)
        trCH1 = np.einsum("ii,kii->k", C, H1)
        db = trCH * b
        d2b = (trCH1 + trCH**2) * b
        chi, dchi, d2chi = _cutoff_jet(y, self.spec.cutoff)
        m = len(s)
        gT = np.zeros((m, n + 1), dtype=complex)
        gT[:, 0] = 0.5 * np.einsum("ki,kij,kj->k", y, H1, y)
        gT[:, 1:] = np.einsum("kij,kj->ki", H, y)
        gT[:, 1] += 1.0
        hT = np.zeros((m, n + 1, n + 1), dtype=complex)
        hT[:, 0, 0] = 0.5 * np.einsum("ki,kij,kj->k", y, H2, y)
        hT[:, 0, 1:] = hT[:, 1:, 0] = np.einsum("kij,kj->ki", H1, y)
        hT[:, 1:, 1:] = H
        A = b * chi
        gA = np.zeros((m, n + 1), dtype=complex)
        gA[:, 0] = db * chi
        gA[:, 1:] = b[:, None] * dchi
        hA = np.zeros((m, n + 1, n + 1), dtype=complex)
        hA[:, 0, 0] = d2b * chi
        hA[:, 0, 1:] = hA[:, 1:, 0] = db[:, None] * dchi
        hA[:, 1:, 1:] = b[:, None, None] * d2chi
        ginv, cvec = _operator_coefficients(self.chart, s, y)

        def G(u, v):
            return np.einsum("kab,ka,kb->k", ginv, u, v)

        def box(grad, hess):
            return np.einsum("kab,kab->k", ginv, hess) + np.einsum("ka,ka->k", cvec, grad)

        tau = self.tau
        theta = y[:, 0] + 0.5 * np.einsum("ki,kij,kj->k", y, H, y)
        bracket = -(tau**2) * G(gT, gT) * A + 1j * tau * (2 * G(gT, gA) + box(gT, hT) * A) + box(gA, hA)
        v = self.prefactor * np.exp(1j * tau * theta) * bracket
        return self.factor * (np.conj(v) if self.conjugated else v)


def assemble_beam(spec):
    """Solve the phase and amplitude equations and return the beam."""
    chart = spec.chart
    phase = solve_riccati(chart.metric, chart, spec.H0)
    amp = solve_transport(chart.metric, chart, phase, s0=spec.s0)
    return Beam(spec, phase, amp)


def conjugate_beam(beam):
    """Beam whose values are the complex conjugates of ``beam``."""
    return replace(beam, conjugated=not beam.conjugated, factor=np.conj(beam.factor))


def beam_through(metric, domain, point, velocity, tau, cutoff_radius, H0=None, p=4, order=None, s0=0.0, tol=1e-10):
    """Beam along the null geodesic through ``point`` with tangent ``velocity``.

    The geodesic is traced in both directions until it leaves the domain
    inflated by a margin of a few tube radii, so the tube covers every
    part of the box the beam can reach.
    """
    x = as_point(point)
    v = np.asarray(velocity, dtype=float)
    if v[0] < 0:
        v = -v
    widest = float(np.max(cutoff_radius))
    margin = 3.0 * widest
    big = domain.inflated(margin)
    reach = 4.0 * (big.T - big.t_start + sum(hi - lo for lo, hi in big.bounds))
    path = integrate_geodesic(metric, x, v, reach, tol=tol, domain=big, s_min=-reach)
    frame = build_frame(metric, x, v)
    chart = fermi_chart(metric, path, frame, widest)
    spec = BeamSpec(chart, float(tau), H0=H0, p=p, order=order, cutoff=cutoff_radius, s0=s0)
    return assemble_beam(spec)


def check_resolution(beam, grid, nodes=NODES_PER_WAVELENGTH):
    """Raise :class:`ResolutionError` unless the grid has ``nodes`` points per wavelength.

    The local wavelength along coordinate ``a`` is ``2 pi / (tau |d_a y_1|)``
    sampled along the axis.
    """
    chart = beam.chart
    s = np.linspace(chart.frames.s_min, chart.frames.s_max, 64)
    J = chart.jacobian(s, np.zeros((len(s), chart.n)))
    grad_y1 = np.abs(np.linalg.inv(J)[:, 1, :])  # d y_1 / d x^a
    steps = np.array((grid.dt,) + tuple(grid.dx))
    worst = float(np.max(grad_y1 * steps[None, :])) * beam.tau
    per_wave = 2 * np.pi / worst if worst > 0 else np.inf
    if per_wave < nodes:
        raise ResolutionError(
            f"grid resolves {per_wave:.1f} nodes per wavelength at tau = {beam.tau:g}; need {nodes}"
        )
    return per_wave


def beam_residual(beam, grid, check=True):
    """Analytic ``box_g v_tau`` on the grid and its discrete L2 norm."""
    if check:
        check_resolution(beam, grid)
    s, y, inside = beam._grid_coords(grid)
    vals = np.zeros(grid.shape, dtype=complex)
    if np.any(inside):
        vals[inside] = beam.box_chart(s[inside], y[inside])
    return ScalarField(grid, vals), l2_norm(vals, grid)


def beam_lp_norm(beam, grid, p=4):
    """``L^p`` norm of the beam over the grid with the metric volume."""
    v = beam.on_grid(grid).values
    return float(np.real(integrate(beam.metric, grid, np.abs(v) ** p)) ** (1.0 / p))


def envelope_constant(beam, points):
    """Largest ``c`` with ``|v| <= tau^(n/2p) |b| exp(-c tau |y|^2)`` on the sampled tube points."""
    s, y, inside = beam.coordinates(points)
    s, y = s[inside], y[inside]
    r2 = np.sum(y * y, axis=-1)
    keep = r2 > 1e-12
    s, y, r2 = s[keep], y[keep], r2[keep]
    v = np.abs(beam.evaluate_chart(s, y)) / abs(beam.factor)
    ref = beam.prefactor * np.abs(beam.amplitude.b00(s))
    ratio = np.clip(v / ref, 1e-300, None)
    return float(np.min(-np.log(ratio) / (beam.tau * r2)))


# --------------------------------------------------------------------------
# correction to exact solutions


@dataclass(frozen=True, eq=False)
class CorrectedBeam:
    """Beam plus correction; ``combined = beam + correction`` on the grid."""

    beam: Beam
    correction: ScalarField
    combined: ScalarField
    direction: str
    mode: str

    def ratio(self):
        g = self.combined.grid
        vnorm = l2_norm(self.combined.values - self.correction.values, g)
        return l2_norm(self.correction.values, g) / vnorm if vnorm > 0 else 0.0


def _check_cauchy(values, direction, scale):
    levels = values[:2] if direction == "forward" else values[-2:]
    if np.max(np.abs(levels)) > 1e-12 * max(scale, 1e-300):
        where = "initial" if direction == "forward" else "final"
        raise CauchySurfaceError(f"beam does not vanish near the {where} Cauchy surface")


def correct_beam(beam, direction, grid, residual="continuum"):
    """Correct a beam to an exact solution of ``box_g v = 0`` with the beam's lateral trace.

    ``direction='forward'`` gives zero Cauchy data at the initial time,
    ``'backward'`` at the final time.  With ``residual='continuum'`` the
    correction solves ``box_g r = -box_g v_tau`` with the analytic beam
    residual.  With ``residual='discrete'`` the combined field is the
    discrete solution with the beam's boundary trace, so it satisfies the
    scheme exactly.
    """
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    metric = beam.metric
    v = beam.on_grid(grid).values
    _check_cauchy(v, direction, float(np.max(np.abs(v))))
    if residual == "continuum":
        box_v, _ = beam_residual(beam, grid)
        if np.any(box_v.values):
            F = -box_v.values
            if direction == "forward":
                r = solve_linear(metric, F, None, None, None, grid).values
            else:
                r = solve_linear_backward(metric, None, grid, F=F).values
        else:
            r = np.zeros(grid.shape, dtype=complex)
        combined = v + r
    elif residual == "discrete":
        f = beam.boundary_data(grid)
        if direction == "forward":
            combined = solve_linear(metric, None, f, None, None, grid).values
        else:
            combined = solve_linear_backward(metric, f, grid).values
        r = combined - v
    else:
        raise ValueError("residual must be 'continuum' or 'discrete'")
    return CorrectedBeam(beam, ScalarField(grid, r), ScalarField(grid, combined), direction, residual)


# --------------------------------------------------------------------------
# phase Hessian at intersections


def _orthonormal_frame(metric, e):
    """Columns ``E_0..E_n`` with ``E^T g E = diag(-1, 1, ..., 1)``."""
    p = as_point(e)
    beta = float(metric.beta_at(p))
    h = metric.h_at(p)
    L = np.linalg.cholesky(h)
    n = h.shape[0]
    E = np.zeros((n + 1, n + 1))
    E[0, 0] = 1.0 / np.sqrt(beta)
    E[1:, 1:] = np.linalg.inv(L).T
    return E


def imag_phase_hessian(beam, e):
    """Coordinate Hessian of ``Im Theta`` at an axis point ``e``."""
    chart = beam.chart
    s, y, inside = chart.inverse(as_point(e)[None, :])
    if not np.isfinite(s[0]):
        raise ProbeError("event is not covered by the beam chart")
    J = chart.jacobian(s, np.zeros((1, chart.n)))[0]
    R = np.linalg.inv(J)[1:, :]
    H = beam.phase.H(s)[0]
    sign = -1.0 if beam.conjugated else 1.0
    return sign * R.T @ H.imag @ R


def phase_hessian(beam1, beam2, e, parallel_tol=1e-6):
    """``2 Hess Im(Theta_1 + Theta_2)`` at ``e`` in normal coordinates.

    The phases have vanishing imaginary gradient on their axes, so the
    covariant and coordinate Hessians agree and the change to normal
    coordinates is the congruence with a ``g``-orthonormal frame at ``e``.

    Returns
    -------
    (ndarray, float)
        The matrix and its determinant.
    """
    p = as_point(e)
    metric = beam1.metric
    t1 = _axis_tangent(beam1, p)
    t2 = _axis_tangent(beam2, p)
    scale = np.linalg.norm(t1) * np.linalg.norm(t2)
    if abs(float(inner(metric, p, t1, t2))) < parallel_tol * scale:
        raise ProbeError("beam tangents are parallel at the intersection; Hessian degenerates")
    Hx = 2 * (imag_phase_hessian(beam1, p) + imag_phase_hessian(beam2, p))
    E = _orthonormal_frame(metric, p)
    Hz = E.T @ Hx @ E
    Hz = 0.5 * (Hz + Hz.T)
    eig = np.linalg.eigvalsh(Hz)
    if eig[0] <= 0:
        raise PositivityError(f"phase Hessian is not positive definite (min eigenvalue {eig[0]:.3g})")
    return Hz, float(np.prod(eig))


def _axis_tangent(beam, p):
    s, _, _ = beam.chart.inverse(p[None, :])
    if not np.isfinite(s[0]):
        raise ProbeError("event is not covered by the beam chart")
    _, v, _ = beam.chart.frames.evaluate(s)
    return v[0]
