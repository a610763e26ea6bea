"""Product Lorentzian metrics, null geodesics, lightcone frames and tube coordinates.

Points of spacetime are handled as arrays whose last axis holds
``(t, x_1, ..., x_n)``.  All metric evaluators broadcast over leading axes.
"""
import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline, RegularGridInterpolator
from scipy.optimize import minimize_scalar
from scipy.spatial import cKDTree

from .errors import (
    DegenerateIntersectionError,
    FermiChartError,
    FrameError,
    GeodesicError,
    IntersectionBoundError,
    MetricError,
    NoBoundaryHitError,
)

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
TRANSVERSALITY_THRESHOLD = 1e-2


# --------------------------------------------------------------------------
# events and domains


@dataclass(frozen=True)
class Event:
    """A spacetime point ``(t, x)``."""

    t: float
    x: tuple

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "x", tuple(float(v) for v in np.atleast_1d(self.x)))

    @property
    def dim(self):
        return len(self.x)

    def as_array(self):
        return np.array([self.t, *self.x])

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=float)
        return cls(a[0], tuple(a[1:]))


def as_point(e):
    """Return ``e`` as a float array with layout ``(t, x...)``."""
    if isinstance(e, Event):
        return e.as_array()
    return np.asarray(e, dtype=float)


@dataclass(frozen=True)
class Domain:
    """The box ``[t_start, T] x prod_i [lo_i, hi_i]``."""

    T: float
    bounds: tuple
    t_start: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple((float(lo), float(hi)) for lo, hi in self.bounds))
        if self.T <= self.t_start:
            raise ValueError("domain needs T > t_start")
        for lo, hi in self.bounds:
            if hi <= lo:
                raise ValueError("empty spatial interval in domain")

    @property
    def n(self):
        return len(self.bounds)

    def contains(self, point, tol=0.0):
        p = as_point(point)
        ok = (p[..., 0] >= self.t_start - tol) & (p[..., 0] <= self.T + tol)
        for i, (lo, hi) in enumerate(self.bounds):
            ok &= (p[..., i + 1] >= lo - tol) & (p[..., i + 1] <= hi + tol)
        return ok

    def distance_to_lateral(self, point):
        p = as_point(point)
        d = np.inf
        for i, (lo, hi) in enumerate(self.bounds):
            d = np.minimum(d, np.minimum(p[..., i + 1] - lo, hi - p[..., i + 1]))
        return d

    def inflated(self, margin):
        return Domain(
            self.T + margin,
            tuple((lo - margin, hi + margin) for lo, hi in self.bounds),
            self.t_start - margin,
        )

    def faces(self):
        """Face names with (axis, value, outward sign)."""
        out = [("t-", 0, self.t_start, -1), ("t+", 0, self.T, 1)]
        for i, (lo, hi) in enumerate(self.bounds):
            out.append((f"x{i + 1}-", i + 1, lo, -1))
            out.append((f"x{i + 1}+", i + 1, hi, 1))
        return out


# --------------------------------------------------------------------------
# metrics


def _central_difference(fun, points, step):
    """Derivatives of ``fun`` along every coordinate; new axis inserted after the batch axes."""
    points = np.asarray(points, dtype=float)
    dim = points.shape[-1]
    out = []
    for c in range(dim):
        dp = np.zeros(dim)
        dp[c] = step
        out.append((fun(points + dp) - fun(points - dp)) / (2 * step))
    return np.stack(out, axis=points.ndim - 1)


@dataclass(frozen=True, eq=False)
class MetricField:
    """Lorentzian metric ``-beta(t,x) dt^2 + h_ij(t,x) dx^i dx^j``.

    Parameters
    ----------
    spatial_dim : int
        Number of spatial dimensions ``n``.
    beta, h : callable
        ``beta(t, x)`` returns shape ``(...)`` and ``h(t, x)`` returns
        ``(..., n, n)`` for ``t`` of shape ``(...)`` and ``x`` of shape ``(..., n)``.
    dbeta, dh : callable, optional
        Closed-form first partials with the derivative index directly after
        the batch axes (``(..., n+1)`` and ``(..., n+1, n, n)``).  Central
        differences are used when omitted.
    constant : bool
        The metric does not depend on the point; all derivatives vanish.
    static : bool
        The metric does not depend on ``t``.
    """

    spatial_dim: int
    beta: Callable
    h: Callable
    dbeta: Callable = None
    dh: Callable = None
    name: str = "custom"
    constant: bool = False
    static: bool = False
    params: dict = field(default_factory=dict)

    def __reduce__(self):
        # named metrics are rebuilt from their factory so they cross process boundaries
        if self.name == "minkowski":
            return minkowski, (self.spatial_dim,)
        if self.name == "perturbed-beta":
            return perturbed_beta, (self.spatial_dim, self.params["coefficient"])
        if self.name == "time-dependent-h":
            return time_dependent_h, (self.spatial_dim, self.params["coefficient"])
        if self.name.startswith("grid:"):
            return grid_metric, (self.name[len("grid:"):],)
        raise TypeError(f"metric {self.name!r} built from closures cannot be pickled")

    @property
    def dim(self):
        return self.spatial_dim + 1

    def split(self, points):
        p = np.asarray(points, dtype=float)
        return p[..., 0], p[..., 1:]

    def beta_at(self, points):
        t, x = self.split(points)
        return np.broadcast_to(np.asarray(self.beta(t, x), dtype=float), t.shape)

    def h_at(self, points):
        t, x = self.split(points)
        n = self.spatial_dim
        return np.broadcast_to(np.asarray(self.h(t, x), dtype=float), t.shape + (n, n))

    def g(self, points):
        """Metric matrix ``g_ab`` with shape ``(..., n+1, n+1)``."""
        b = self.beta_at(points)
        hh = self.h_at(points)
        out = np.zeros(b.shape + (self.dim, self.dim))
        out[..., 0, 0] = -b
        out[..., 1:, 1:] = hh
        return out

    def g_inv(self, points):
        b = self.beta_at(points)
        hh = self.h_at(points)
        out = np.zeros(b.shape + (self.dim, self.dim))
        out[..., 0, 0] = -1.0 / b
        out[..., 1:, 1:] = np.linalg.inv(hh)
        return out

    def sqrt_det(self, points):
        """``sqrt|det g| = sqrt(beta det h)``."""
        return np.sqrt(self.beta_at(points) * np.linalg.det(self.h_at(points)))

    def dg(self, points):
        """First partials ``d_c g_ab`` with shape ``(..., n+1, n+1, n+1)`` indexed ``[c, a, b]``."""
        points = np.asarray(points, dtype=float)
        batch = points.shape[:-1]
        d = self.dim
        if self.constant:
            return np.zeros(batch + (d, d, d))
        if self.dbeta is not None and self.dh is not None:
            t, x = self.split(points)
            db = np.broadcast_to(np.asarray(self.dbeta(t, x), dtype=float), batch + (d,))
            dhh = np.broadcast_to(np.asarray(self.dh(t, x), dtype=float), batch + (d, d - 1, d - 1))
            out = np.zeros(batch + (d, d, d))
            out[..., :, 0, 0] = -db
            out[..., :, 1:, 1:] = dhh
            return out
        return _central_difference(self.g, points, FD_STEP)

    def check(self, points, tol=0.0):
        """Raise :class:`MetricError` unless ``beta > 0`` and ``h`` is SPD at ``points``."""
        b = self.beta_at(points)
        if np.any(~np.isfinite(b)) or np.any(b <= tol):
            raise MetricError(f"beta must be positive (min {np.min(b):.3g})")
        eig = np.linalg.eigvalsh(self.h_at(points))
        if np.any(eig <= tol):
            raise MetricError(f"h must be positive definite (min eigenvalue {np.min(eig):.3g})")

    def max_speed(self, points):
        """``sup sqrt(beta * lambda_max(h^-1))``, the coordinate speed of light."""
        b = self.beta_at(points)
        eig = np.linalg.eigvalsh(self.h_at(points))
        return float(np.max(np.sqrt(b / eig[..., 0])))


def minkowski(n):
    return MetricField(
        n,
        beta=lambda t, x: np.ones_like(t),
        h=lambda t, x: np.broadcast_to(np.eye(n), np.shape(t) + (n, n)),
        name="minkowski",
        constant=True,
        static=True,
    )


def perturbed_beta(n, coefficient):
    """``beta = 1 + c |x|^2`` with Euclidean ``h``."""
    c = float(coefficient)

    def dbeta(t, x):
        return np.concatenate([np.zeros(np.shape(t) + (1,)), 2 * c * x], axis=-1)

    return MetricField(
        n,
        beta=lambda t, x: 1.0 + c * np.sum(x * x, axis=-1),
        h=lambda t, x: np.broadcast_to(np.eye(n), np.shape(t) + (n, n)),
        dbeta=dbeta,
        dh=lambda t, x: np.zeros(np.shape(t) + (n + 1, n, n)),
        name="perturbed-beta",
        static=True,
        params={"coefficient": c},
    )


def time_dependent_h(n, coefficient):
    """``beta = 1`` and ``h = (1 + c t) I``."""
    c = float(coefficient)

    def dh(t, x):
        out = np.zeros(np.shape(t) + (n + 1, n, n))
        out[..., 0, :, :] = c * np.eye(n)
        return out

    return MetricField(
        n,
        beta=lambda t, x: np.ones_like(t),
        h=lambda t, x: (1.0 + c * np.asarray(t))[..., None, None] * np.eye(n),
        dbeta=lambda t, x: np.zeros(np.shape(t) + (n + 1,)),
        dh=dh,
        name="time-dependent-h",
        params={"coefficient": c},
    )


def grid_metric(path):
    """Metric sampled on a tensor grid, read from CSV.

    Columns are ``t, x1..xn, beta`` followed by the upper triangle of ``h``
    named ``h11, h12, ...``.  Rows may come in any order but must cover a
    full tensor grid.  Values are interpolated with cubic splines (linear
    when an axis has fewer than four nodes).
    """
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise MetricError(f"metric CSV {path} is empty")
    cols = list(rows[0].keys())
    xcols = [c for c in cols if c.startswith("x")]
    n = len(xcols)
    coord_cols = ["t"] + sorted(xcols, key=lambda c: int(c[1:]))
    data = {c: np.array([float(r[c]) for r in rows]) for c in cols}
    axes = [np.unique(data[c]) for c in coord_cols]
    shape = tuple(len(a) for a in axes)
    if np.prod(shape) != len(rows):
        raise MetricError("metric CSV does not form a full tensor grid")
    index = tuple(np.searchsorted(ax, data[c]) for ax, c in zip(axes, coord_cols))
    method = "cubic" if min(shape) >= 4 else "linear"

    def table(col):
        arr = np.empty(shape)
        arr[index] = data[col]
        return RegularGridInterpolator(axes, arr, method=method, bounds_error=False, fill_value=None)

    beta_i = table("beta")
    h_i = {}
    for i in range(n):
        for j in range(i, n):
            h_i[(i, j)] = table(f"h{i + 1}{j + 1}")

    def pts(t, x):
        return np.concatenate([np.asarray(t)[..., None], x], axis=-1)

    def beta(t, x):
        p = pts(t, x)
        return beta_i(p.reshape(-1, n + 1)).reshape(p.shape[:-1])

    def h(t, x):
        p = pts(t, x)
        flat = p.reshape(-1, n + 1)
        out = np.empty((flat.shape[0], n, n))
        for (i, j), f in h_i.items():
            out[:, i, j] = out[:, j, i] = f(flat)
        return out.reshape(p.shape[:-1] + (n, n))

    return MetricField(n, beta=beta, h=h, name=f"grid:{path}")


def christoffel(metric, e):
    """Christoffel symbols ``Gamma^a_bc`` of the Levi-Civita connection.

    Returns an array of shape ``(..., n+1, n+1, n+1)`` indexed ``[a, b, c]``,
    symmetric in ``b, c``.
    """
    p = as_point(e)
    ginv = metric.g_inv(p)
    if not np.all(np.isfinite(ginv)):
        raise MetricError("metric not invertible")
    dg = metric.dg(p)  # [c, a, b] = d_c g_ab
    # lowered symbol Gamma_dbc = 1/2 (d_b g_dc + d_c g_db - d_d g_bc)
    low = 0.5 * (
        np.swapaxes(dg, -3, -2)
        + np.moveaxis(dg, -3, -1)
        - dg
    )
    # low currently indexed [d, b, c]; check layout:
    # swapaxes(dg)[d, b, c] = dg[b, d, c] = d_b g_dc
    # moveaxis(dg, -3, -1)[d, b, c] = dg[c, d, b] = d_c g_db
    return np.einsum("...ad,...dbc->...abc", ginv, low)


def christoffel_derivative(metric, e, step=FD_STEP):
    """Partials ``d_m Gamma^a_bc`` indexed ``[m, a, b, c]`` by central differences."""
    p = as_point(e)
    d = metric.dim
    if metric.constant:
        return np.zeros(p.shape[:-1] + (d, d, d, d))
    return _central_difference(lambda q: christoffel(metric, q), p, step)


def inner(metric, e, u, v):
    G = metric.g(as_point(e))
    return np.einsum("...a,...ab,...b->...", u, G, v)


def null_vector(metric, e, spatial_direction, future=True):
    """Null vector ``(+-1, xi)`` with ``xi`` parallel to ``spatial_direction``."""
    p = as_point(e)
    w = np.asarray(spatial_direction, dtype=float)
    hh = metric.h_at(p)
    norm = np.sqrt(w @ hh @ w)
    xi = w * np.sqrt(metric.beta_at(p)) / norm
    return np.concatenate([[1.0 if future else -1.0], xi])


# --------------------------------------------------------------------------
# geodesics


def _geodesic_rhs(metric):
    d = metric.dim

    def rhs(s, y):
        p, v = y[:d], y[d:]
        G = christoffel(metric, p)
        return np.concatenate([v, -np.einsum("abc,b,c->a", G, v, v)])

    return rhs


class _PiecewiseSolution:
    """Joins the backward and forward dense outputs of an integration."""

    def __init__(self, forward, backward=None):
        self.forward = forward
        self.backward = backward

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        scalar = s.ndim == 0
        s = np.atleast_1d(s)
        out = np.empty((self.forward(0.0).shape[0], s.size))
        pos = s >= 0
        if np.any(pos):
            out[:, pos] = self.forward(s[pos])
        if np.any(~pos):
            if self.backward is None:
                raise GeodesicError("path does not extend to negative parameters")
            out[:, ~pos] = self.backward(s[~pos])
        return out[:, 0] if scalar else out


@dataclass(frozen=True, eq=False)
class GeodesicPath:
    """Sampled causal curve with a dense interpolant.

    ``s``, ``points`` and ``velocities`` are the accepted integrator steps;
    ``state(s)`` evaluates position and velocity anywhere in the range.
    """

    s: np.ndarray
    points: np.ndarray
    velocities: np.ndarray
    causal_type: str
    exit_event: Event = None
    exit_face: str = None
    entry_event: Event = None
    entry_face: str = None
    null_drift: float = 0.0
    dense: Callable = None

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def s_range(self):
        return float(self.s[0]), float(self.s[-1])

    def state(self, s):
        if self.dense is not None:
            y = self.dense(s)
            d = self.dim
            return y[:d], y[d:]
        spl = CubicHermiteSpline(self.s, self.points, self.velocities, axis=0)
        return spl(s).T, spl.derivative()(s).T

    def position_at_time(self, t):
        """Spatial position where the path crosses coordinate time ``t``."""
        tt = self.points[:, 0]
        order = np.argsort(tt)
        vt = self.velocities[order, 0]
        dxdt = self.velocities[order, 1:] / vt[:, None]
        spl = CubicHermiteSpline(tt[order], self.points[order, 1:], dxdt, axis=0)
        return spl(t)

    @classmethod
    def from_points(cls, points, causal_type="timelike"):
        """Fabricated path through the given events (ordered by ``t``)."""
        pts = np.asarray(points, dtype=float)
        pts = pts[np.argsort(pts[:, 0])]
        s = pts[:, 0] - pts[0, 0]
        vel = np.gradient(pts, s, axis=0, edge_order=2)
        return cls(s, pts, vel, causal_type)


def _face_events(domain, d):
    events = []
    names = []
    for name, axis, value, sign in domain.faces():
        def ev(s, y, axis=axis, value=value):
            return y[axis] - value

        ev.terminal = True
        ev.direction = float(sign)
        events.append(ev)
        names.append(name)
    return events, names


def _integrate_one(metric, y0, s_end, tol, domain, max_step):
    d = metric.dim
    events, names = ([], []) if domain is None else _face_events(domain, d)
    sol = solve_ivp(
        _geodesic_rhs(metric),
        (0.0, s_end),
        y0,
        method="RK45",
        rtol=tol,
        atol=tol * 1e-2,
        dense_output=True,
        events=events or None,
        max_step=max_step,
    )
    if sol.status == -1:
        raise GeodesicError(f"geodesic integration failed: {sol.message}")
    face = None
    hit = None
    if domain is not None and sol.status == 1:
        for name, times, states in zip(names, sol.t_events, sol.y_events):
            if len(times):
                face = name
                hit = states[0][:d]
                break
    return sol, face, hit


def integrate_geodesic(metric, start, v0, s_max, tol=1e-10, domain=None, s_min=0.0, max_step=None):
    """Integrate the geodesic through ``start`` with initial velocity ``v0``.

    The path runs over ``[s_min, s_max]`` and is truncated at the first exit
    from ``domain`` in either direction.  The exit through the end ``s > 0``
    is reported as ``exit_event``/``exit_face``; the one through ``s < 0`` as
    ``entry_event``/``entry_face``.
    """
    p0 = as_point(start)
    v0 = np.asarray(v0, dtype=float)
    d = metric.dim
    if not np.any(v0):
        raise GeodesicError("initial velocity is zero")
    norm0 = float(inner(metric, p0, v0, v0))
    scale = float(v0 @ v0)
    if norm0 > 1e-10 * scale:
        raise GeodesicError("initial velocity is spacelike")
    causal = "null" if abs(norm0) <= 1e-10 * scale else "timelike"
    if domain is not None and not domain.contains(p0, tol=1e-12):
        raise GeodesicError("start event lies outside the domain")
    if max_step is None:
        max_step = max(abs(s_max), abs(s_min), 1e-12) / 64
    y0 = np.concatenate([p0, v0])

    fwd, face, hit = _integrate_one(metric, y0, s_max, tol, domain, max_step)
    if face is not None and fwd.t[-1] <= 1e-12:
        raise GeodesicError(f"immediate exit through face {face}")
    bwd = None
    bface = bhit = None
    if s_min < 0:
        bwd, bface, bhit = _integrate_one(metric, y0, s_min, tol, domain, max_step)
        if bface is not None and bwd.t[-1] >= -1e-12:
            raise GeodesicError(f"immediate exit through face {bface} (backward)")

    s = fwd.t
    states = fwd.y
    if bwd is not None:
        s = np.concatenate([bwd.t[::-1][:-1], s])
        states = np.concatenate([bwd.y[:, ::-1][:, :-1], states], axis=1)
    pts = states[:d].T.copy()
    vel = states[d:].T.copy()
    norms = inner(metric, pts, vel, vel)
    drift = float(np.max(np.abs(norms - norm0)))
    dense = _PiecewiseSolution(fwd.sol, bwd.sol if bwd is not None else None)
    return GeodesicPath(
        s=s,
        points=pts,
        velocities=vel,
        causal_type=causal,
        exit_event=Event.from_array(hit) if hit is not None else None,
        exit_face=face,
        entry_event=Event.from_array(bhit) if bhit is not None else None,
        entry_face=bface,
        null_drift=drift,
        dense=dense,
    )


# --------------------------------------------------------------------------
# frames


@dataclass(frozen=True, eq=False)
class Frame:
    """Lightcone frame ``e_0..e_n`` at an event; ``vectors[k]`` is ``e_k``."""

    event: np.ndarray
    vectors: np.ndarray

    def gram(self, metric):
        G = metric.g(self.event)
        return self.vectors @ G @ self.vectors.T

    def defect(self, metric):
        """Largest deviation from the five lightcone-frame identities."""
        return float(np.max(np.abs(self.gram(metric) - reference_gram(len(self.vectors)))))


def reference_gram(dim):
    """Gram matrix a lightcone frame must have."""
    ref = np.eye(dim)
    ref[0, 0] = ref[1, 1] = 0.0
    ref[0, 1] = ref[1, 0] = -2.0
    return ref


def build_frame(metric, e, null_dir, tol=1e-8):
    """Complete a future-directed null vector to a lightcone frame.

    The null vector is split as ``a (T + N)`` with ``T`` the unit normal of
    the time slice and ``N`` a unit spatial vector.  Then ``e_1 = (T - N)/a``
    and ``e_2..e_n`` is an ``h``-orthonormal basis of the spatial complement
    of ``N`` obtained by Gram-Schmidt, taking at each step the coordinate
    axis least aligned with the vectors already chosen.
    """
    p = as_point(e)
    e0 = np.asarray(null_dir, dtype=float)
    d = metric.dim
    G = metric.g(p)
    if abs(e0 @ G @ e0) > tol * max(1.0, e0 @ e0):
        raise FrameError("first frame vector is not null")
    if e0[0] <= 0:
        raise FrameError("first frame vector is not future-directed")
    beta = float(metric.beta_at(p))
    hh = metric.h_at(p)
    a = e0[0] * np.sqrt(beta)
    T = np.zeros(d)
    T[0] = 1.0 / np.sqrt(beta)
    N = np.zeros(d)
    N[1:] = e0[1:] / a
    e1 = (T - N) / a
    vecs = [e0, e1]
    basis = [N[1:]]
    while len(basis) < d - 1:
        # axis with the largest residual, orthogonalized twice for stability
        best = None
        for k in range(d - 1):
            w = np.zeros(d - 1)
            w[k] = 1.0
            for _ in range(2):
                for b in basis:
                    w = w - (b @ hh @ w) * b
            nrm = np.sqrt(w @ hh @ w)
            if best is None or nrm > best[0]:
                best = (nrm, w)
        basis.append(best[1] / best[0])
    for b in basis[1:]:
        vecs.append(np.concatenate([[0.0], b]))
    frame = Frame(p, np.array(vecs))
    err = frame.defect(metric)
    if err > max(tol, 1e-10):
        raise FrameError(f"frame identities violated by {err:.3g}")
    return frame


@dataclass(frozen=True, eq=False)
class FrameField:
    """Geodesic together with its parallel lightcone frame, as functions of ``s``.

    ``evaluate(s)`` returns ``(point, velocity, E)`` where ``E[..., k, :]`` is
    ``e_k(s)`` and ``e_0(s)`` is the geodesic velocity.
    """

    s_min: float
    s_max: float
    dim: int
    dense: Callable
    s_samples: np.ndarray
    max_defect: float
    table: Callable = None

    def evaluate(self, s):
        s = np.asarray(s, dtype=float)
        flat = np.atleast_1d(s).ravel()
        y = self.dense(flat) if self.table is None else self.table(flat).T
        d = self.dim
        p = y[:d].T
        v = y[d : 2 * d].T
        rest = y[2 * d :].T.reshape(flat.size, d - 1, d)
        E = np.concatenate([v[:, None, :], rest], axis=1)
        shape = s.shape
        return p.reshape(shape + (d,)), v.reshape(shape + (d,)), E.reshape(shape + (d, d))


def _transport_rhs(metric):
    d = metric.dim

    def rhs(s, y):
        p, v = y[:d], y[d : 2 * d]
        es = y[2 * d :].reshape(d - 1, d)
        G = christoffel(metric, p)
        dv = -np.einsum("abc,b,c->a", G, v, v)
        de = -np.einsum("abc,b,kc->ka", G, v, es)
        return np.concatenate([v, dv, de.ravel()])

    return rhs


def _transport_rhs_batch(metric, ys):
    """Right-hand side of the transport system for many states ``ys[k]``."""
    d = metric.dim
    p, v = ys[:, :d], ys[:, d : 2 * d]
    es = ys[:, 2 * d :].reshape(len(ys), d - 1, d)
    if metric.constant:
        return np.concatenate([v, np.zeros_like(v), np.zeros_like(es).reshape(len(ys), -1)], axis=1)
    G = christoffel(metric, p)
    dv = -np.einsum("nabc,nb,nc->na", G, v, v)
    de = -np.einsum("nabc,nb,nkc->nka", G, v, es)
    return np.concatenate([v, dv, de.reshape(len(ys), -1)], axis=1)


def parallel_transport(metric, path, f0, tol=1e-11, defect_tol=1e-7):
    """Transport ``f0`` along ``path`` (geodesic and frame integrated jointly).

    Raises :class:`FrameError` when the frame identities drift by more than
    ``defect_tol`` at any sample.
    """
    d = metric.dim
    p0, v0 = path.state(0.0)
    if np.max(np.abs(f0.vectors[0] - v0)) > 1e-8 * max(1.0, np.abs(v0).max()):
        raise FrameError("frame e_0 does not match the path velocity")
    y0 = np.concatenate([p0, v0, f0.vectors[1:].ravel()])
    s_lo, s_hi = path.s_range
    rhs = _transport_rhs(metric)
    span = max(s_hi - s_lo, 1e-12)
    fwd = solve_ivp(rhs, (0.0, s_hi), y0, rtol=tol, atol=tol * 1e-2, dense_output=True, max_step=span / 64)
    bwd = None
    if s_lo < 0:
        bwd = solve_ivp(rhs, (0.0, s_lo), y0, rtol=tol, atol=tol * 1e-2, dense_output=True, max_step=span / 64)
    if fwd.status < 0 or (bwd is not None and bwd.status < 0):
        raise FrameError("parallel transport integration failed")
    dense = _PiecewiseSolution(fwd.sol, bwd.sol if bwd is not None else None)
    # cubic Hermite table: much cheaper to evaluate than the dense ODE output
    s_tab = np.linspace(s_lo, s_hi, 4097)
    y_tab = dense(s_tab)
    dy_tab = _transport_rhs_batch(metric, y_tab.T)
    table = CubicHermiteSpline(s_tab, y_tab.T, dy_tab, axis=0)
    field_ = FrameField(s_lo, s_hi, d, dense, np.asarray(path.s), 0.0, table)
    pts, _, E = field_.evaluate(path.s)
    G = metric.g(pts)
    gram = np.einsum("nka,nab,nlb->nkl", E, G, E)
    defect = float(np.max(np.abs(gram - reference_gram(d))))
    if defect > defect_tol:
        raise FrameError(f"transported frame drifted by {defect:.3g}")
    return FrameField(s_lo, s_hi, d, dense, np.asarray(path.s), defect, table)


# --------------------------------------------------------------------------
# tube coordinates


@dataclass(eq=False)
class FermiChart:
    """Tube coordinates ``(s, y)`` along a null geodesic.

    The forward map is the second-order jet of the exponential map,
    ``x(s, y) = gamma(s) + Y - 1/2 Gamma(gamma(s))(Y, Y)`` with
    ``Y = sum_k y_k e_k(s)``.  It agrees with ``exp_gamma(s)(Y)`` up to
    ``O(|y|^3)`` (exactly for constant metrics), reproduces the lightcone
    form of the metric on the axis and makes all Christoffel symbols vanish
    there, which is everything the beam construction uses.
    """

    metric: MetricField
    path: GeodesicPath
    frames: FrameField
    radius: float

    @property
    def n(self):
        return self.metric.spatial_dim

    def _axis(self, s):
        p, v, E = self.frames.evaluate(s)
        return p, v, E

    def forward(self, s, y):
        s = np.asarray(s, dtype=float)
        y = np.asarray(y, dtype=float).reshape(s.shape + (self.n,))
        p, _, E = self._axis(s)
        Y = np.einsum("...k,...ka->...a", y, E[..., 1:, :])
        if self.metric.constant:
            return p + Y
        G = christoffel(self.metric, p)
        return p + Y - 0.5 * np.einsum("...abc,...b,...c->...a", G, Y, Y)

    def jacobian(self, s, y):
        """Matrix ``dx/d(s, y)`` with columns ``[d_s, d_y1, ..., d_yn]``."""
        s = np.asarray(s, dtype=float)
        y = np.asarray(y, dtype=float).reshape(s.shape + (self.n,))
        p, v, E = self._axis(s)
        Ek = E[..., 1:, :]
        Y = np.einsum("...k,...ka->...a", y, Ek)
        J = np.empty(s.shape + (self.n + 1, self.n + 1))
        if self.metric.constant:
            J[..., :, 0] = v
            J[..., :, 1:] = np.swapaxes(Ek, -1, -2)
            return J
        G = christoffel(self.metric, p)
        dG = christoffel_derivative(self.metric, p)
        dGs = np.einsum("...mabc,...m->...abc", dG, v)
        dEk = -np.einsum("...abc,...b,...kc->...ka", G, v, Ek)
        dY = np.einsum("...k,...ka->...a", y, dEk)
        J[..., :, 0] = (
            v
            + dY
            - 0.5 * np.einsum("...abc,...b,...c->...a", dGs, Y, Y)
            - np.einsum("...abc,...b,...c->...a", G, dY, Y)
        )
        J[..., :, 1:] = np.swapaxes(Ek - np.einsum("...abc,...kb,...c->...ka", G, Ek, Y), -1, -2)
        return J

    def metric_in_chart(self, s, y):
        """Pulled-back metric ``g_F(s, y)``."""
        x = self.forward(s, y)
        J = self.jacobian(s, y)
        return np.einsum("...ai,...ab,...bj->...ij", J, self.metric.g(x), J)

    def _axis_tree(self):
        if getattr(self, "_tree", None) is None:
            s_grid = np.linspace(self.frames.s_min, self.frames.s_max, 2049)
            axis_pts, _, _ = self._axis(s_grid)
            self._tree = (cKDTree(axis_pts), s_grid)
        return self._tree

    def inverse(self, points, max_iter=30, tol=1e-12, s_guess=None):
        """Solve ``forward(s, y) = points`` by damped Newton.

        Returns ``(s, y, inside)``; ``inside`` is False where Newton failed,
        ``s`` left the traced range or ``|y| >= radius``.
        """
        pts = np.asarray(points, dtype=float)
        batch = pts.shape[:-1]
        flat = pts.reshape(-1, self.n + 1)
        m = flat.shape[0]
        if s_guess is None:
            tree, s_grid = self._axis_tree()
            _, nearest = tree.query(flat, workers=-1)
            s = s_grid[nearest]
        else:
            s = np.array(s_guess, dtype=float).reshape(-1)
        y = np.zeros((m, self.n))
        converged = np.zeros(m, dtype=bool)
        active = np.ones(m, dtype=bool)
        lo, hi = self.frames.s_min, self.frames.s_max
        for _ in range(max_iter):
            idx = np.nonzero(active)[0]
            if idx.size == 0:
                break
            res = self.forward(s[idx], y[idx]) - flat[idx]
            J = self.jacobian(s[idx], y[idx])
            try:
                step = np.linalg.solve(J, res[..., None])[..., 0]
            except np.linalg.LinAlgError:
                raise FermiChartError("singular chart jacobian")
            size = np.max(np.abs(step), axis=-1)
            damp = np.minimum(1.0, 0.5 * self.radius / np.maximum(size, 1e-300))
            s[idx] = np.clip(s[idx] - damp * step[:, 0], lo, hi)
            y[idx] = y[idx] - damp[:, None] * step[:, 1:]
            done = size < tol * (1 + np.abs(s[idx]))
            converged[idx[done]] = True
            active[idx[done]] = False
            far = np.linalg.norm(y[idx], axis=-1) > 4 * self.radius
            active[idx[far]] = False
        if np.any(active):
            res = self.forward(s[active], y[active]) - flat[active]
            converged[np.nonzero(active)[0][np.max(np.abs(res), axis=-1) < 1e-9]] = True
        inside = converged & (np.linalg.norm(y, axis=-1) < self.radius) & (s > lo) & (s < hi)
        s[~converged] = np.nan
        y[~converged] = np.nan
        return s.reshape(batch), y.reshape(batch + (self.n,)), inside.reshape(batch)


def fermi_chart(metric, path, f0, radius, check_samples=32, seed=0):
    """Build tube coordinates of the given radius around ``path``.

    A sampled round-trip test guards injectivity; failure raises
    :class:`FermiChartError` (radius too large).
    """
    frames = parallel_transport(metric, path, f0)
    chart = FermiChart(metric, path, frames, float(radius))
    rng = np.random.default_rng(seed)
    lo, hi = frames.s_min, frames.s_max
    s = rng.uniform(lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo), check_samples)
    y = rng.uniform(-1, 1, (check_samples, chart.n))
    y *= (0.95 * radius * rng.uniform(0, 1, check_samples) / np.maximum(np.linalg.norm(y, axis=1), 1e-12))[:, None]
    det = np.linalg.det(chart.jacobian(s, y))
    if np.any(np.abs(det) < 1e-10):
        raise FermiChartError("tube radius too large: chart jacobian degenerates")
    s2, y2, ok = chart.inverse(chart.forward(s, y))
    if not np.all(ok) or np.max(np.abs(s2 - s)) > 1e-6 or np.max(np.abs(y2 - y)) > 1e-6:
        raise FermiChartError("tube radius too large: chart is not injective on the sampled tube")
    return chart


def fermi_inverse(chart, e):
    """``(s, y)`` of an event, or ``None`` when it lies outside the tube."""
    s, y, inside = chart.inverse(as_point(e)[None, :])
    if not inside[0]:
        return None
    return float(s[0]), y[0]


# --------------------------------------------------------------------------
# boundary optimal geodesics


@dataclass(frozen=True, eq=False)
class BoundaryHit:
    """Null geodesic from an interior event to its extremal lateral hit."""

    path: GeodesicPath
    event: Event
    face: str
    angle: float
    transversal: bool
    spatial_direction: np.ndarray
    velocity: np.ndarray


def _travel_bound(domain, metric, x):
    diam = np.sqrt(sum((hi - lo) ** 2 for lo, hi in domain.bounds))
    return 4.0 * (domain.T - domain.t_start + diam) * max(1.0, 1.0 / np.sqrt(float(metric.beta_at(x))))


def _hit(metric, domain, x, direction, future, tol):
    v = null_vector(metric, x, direction, future=future)
    s_max = _travel_bound(domain, metric, x)
    try:
        path = integrate_geodesic(metric, x, v, s_max, tol=tol, domain=domain)
    except GeodesicError:
        return None
    if path.exit_face is None or path.exit_face.startswith("t"):
        return None
    return path, v


def _transversality(metric, hit_event, face, velocity):
    axis = int(face[1:-1])
    hh = metric.h_at(hit_event.as_array())
    xi = velocity[1:]
    xi_norm = np.sqrt(xi @ hh @ xi)
    hinv = np.linalg.inv(hh)
    normal_norm = np.sqrt(hinv[axis - 1, axis - 1])
    sin_angle = abs(xi[axis - 1]) / (xi_norm * normal_norm)
    return float(np.arcsin(min(1.0, sin_angle)))


def _directions(n, angular_resolution):
    if n == 1:
        return [np.array([1.0]), np.array([-1.0])], None
    if n == 2:
        count = max(8, int(np.ceil(2 * np.pi / angular_resolution)))
        angles = 2 * np.pi * np.arange(count) / count
        return [np.array([np.cos(a), np.sin(a)]) for a in angles], angles
    count = max(16, int(np.ceil(4 * np.pi / angular_resolution**2)))
    i = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * i / count)
    theta = np.pi * (1 + 5**0.5) * i
    dirs = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    if n > 3:
        raise ValueError("boundary search supports n <= 3")
    return list(dirs), None


def boundary_optimal_geodesic(metric, domain, x, direction="future", angular_resolution=0.05, tol=1e-10):
    """Null geodesic from ``x`` reaching the lateral boundary at extremal time.

    For ``direction='future'`` the earliest lateral hit is returned, for
    ``'past'`` the latest.  Directions that reach ``{t=t_start}`` or
    ``{t=T}`` first do not count.  In two spatial dimensions the best
    sampled angle is refined with a bounded scalar search.
    """
    future = direction == "future"
    if direction not in ("future", "past"):
        raise ValueError("direction must be 'future' or 'past'")
    p = as_point(x)
    if not domain.contains(p) or domain.distance_to_lateral(p) <= 0:
        raise NoBoundaryHitError("event is not interior to the domain")
    dirs, angles = _directions(domain.n, angular_resolution)
    sign = 1.0 if future else -1.0
    best = None
    best_key = np.inf
    best_idx = None
    for i, w in enumerate(dirs):
        r = _hit(metric, domain, p, w, future, tol)
        if r is None:
            continue
        path, v = r
        key = sign * path.exit_event.t
        if key < best_key - 1e-13:
            best, best_key, best_idx = (path, v, w), key, i
    if best is None:
        raise NoBoundaryHitError(f"no null geodesic from {p} reaches the lateral boundary ({direction})")
    if angles is not None:
        a0 = angles[best_idx]

        def objective(a):
            r = _hit(metric, domain, p, np.array([np.cos(a), np.sin(a)]), future, tol)
            if r is None:
                return best_key + 1e3
            return sign * r[0].exit_event.t

        res = minimize_scalar(
            objective,
            bounds=(a0 - angular_resolution, a0 + angular_resolution),
            method="bounded",
            options={"xatol": 1e-7},
        )
        if res.fun < best_key:
            w = np.array([np.cos(res.x), np.sin(res.x)])
            path, v = _hit(metric, domain, p, w, future, tol)
            best = (path, v, w)
    path, v, w = best
    vel_exit = path.velocities[-1]
    angle = _transversality(metric, path.exit_event, path.exit_face, vel_exit)
    return BoundaryHit(
        path=path,
        event=path.exit_event,
        face=path.exit_face,
        angle=angle,
        transversal=angle >= TRANSVERSALITY_THRESHOLD,
        spatial_direction=np.asarray(w, dtype=float),
        velocity=v,
    )


# --------------------------------------------------------------------------
# intersections


def intersections(path1, path2, spatial_tol=1e-6, cap=None, samples=4001):
    """Events where two causal paths meet, ordered by time.

    Both paths are parameterized by coordinate time on their common time
    range; local minima of the spatial distance below ``spatial_tol`` are
    refined with a bounded scalar search.  A distance that stays below the
    tolerance on an interval raises :class:`DegenerateIntersectionError`;
    more than ``cap`` crossings raise :class:`IntersectionBoundError`.
    """
    t1 = path1.points[:, 0]
    t2 = path2.points[:, 0]
    lo = max(t1.min(), t2.min())
    hi = min(t1.max(), t2.max())
    if hi <= lo:
        return []
    ts = np.linspace(lo, hi, samples)

    def dist(t):
        return np.linalg.norm(path1.position_at_time(t) - path2.position_at_time(t), axis=-1)

    d = dist(ts)
    close = d < spatial_tol
    run = 0
    for c in close:
        run = run + 1 if c else 0
        if run >= 3:
            raise DegenerateIntersectionError("paths coincide on an interval")
    found = []
    dt = ts[1] - ts[0]
    for i in range(len(ts)):
        left = d[i - 1] if i > 0 else np.inf
        right = d[i + 1] if i + 1 < len(ts) else np.inf
        if d[i] <= left and d[i] < right or (d[i] < left and d[i] <= right):
            a, b = max(lo, ts[i] - dt), min(hi, ts[i] + dt)
            res = minimize_scalar(lambda t: float(dist(np.array([t]))[0]), bounds=(a, b), method="bounded",
                                  options={"xatol": 1e-13})
            if res.fun < spatial_tol:
                t_star = float(res.x)
                if found and abs(found[-1] - t_star) < 2 * dt:
                    continue
                found.append(t_star)
    events = []
    for t_star in sorted(found):
        x = 0.5 * (path1.position_at_time(t_star) + path2.position_at_time(t_star))
        events.append(Event(t_star, tuple(np.atleast_1d(x))))
    if cap is not None and len(events) > cap:
        raise IntersectionBoundError(
            f"{len(events)} intersection points exceed the cap P = {cap}; "
            "the number of intersections of two null geodesics must stay finite and bounded"
        )
    return events
