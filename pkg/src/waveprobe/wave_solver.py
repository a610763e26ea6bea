"""Leapfrog finite differences for linear and semilinear wave equations on a box.

The operator is treated in divergence form,

    box_g u = (1/sqrt|g|) [ -d_t(sqrt|g|/beta d_t u) + d_i(sqrt|g| h^ij d_j u) ],

with Dirichlet data on the lateral boundary and Cauchy data at the initial
time.  Grid fields carry the time axis first: ``values[k, i_1, ..., i_n]``.
Lateral boundary samples are stored per face, so a corner node appears once
on every face that contains it.
"""
import functools
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CFLError,
    CompatibilityError,
    ConvergenceError,
    DivergenceError,
    SmallnessError,
)
from .geometry import Domain, MetricField

logger = logging.getLogger(__name__)

MAX_CFL = 0.9


# --------------------------------------------------------------------------
# grids and fields


@dataclass(frozen=True)
class SigmaLayout:
    """Node bookkeeping for the lateral boundary."""

    face: np.ndarray  # face number per node
    index: np.ndarray  # (n_sigma, n) spatial multi-index
    axis: np.ndarray  # normal axis (0-based spatial axis)
    side: np.ndarray  # -1 for the lower face, +1 for the upper face
    weight: np.ndarray  # trapezoid weight on the face (1 for n = 1)
    coords: np.ndarray  # (n_sigma, n)
    names: tuple

    @property
    def size(self):
        return len(self.face)

    def take(self, level_values):
        """Boundary samples of an array whose trailing axes are spatial."""
        return level_values[(Ellipsis,) + tuple(self.index.T)]


def _trapezoid_weights(num, h):
    w = np.full(num, h)
    w[0] = w[-1] = 0.5 * h
    return w


@dataclass(frozen=True, eq=False)
class SpacetimeGrid:
    """Uniform grid on ``[t_start, T] x Omega`` with ``nt`` and ``nx[i]`` intervals."""

    domain: Domain
    nt: int
    nx: tuple

    def __post_init__(self):
        object.__setattr__(self, "nx", tuple(int(v) for v in self.nx))
        if len(self.nx) != self.domain.n:
            raise ValueError("nx must list one count per spatial axis")
        if self.nt < 8 or min(self.nx) < 8:
            raise ValueError("grids need at least 8 intervals per axis")

    @classmethod
    def for_metric(cls, domain, nx, metric, cfl=MAX_CFL):
        """Grid with the largest time step allowed by ``cfl``."""
        if np.isscalar(nx):
            nx = (int(nx),) * domain.n
        probe = cls(domain, 8, nx)
        speed = probe.light_speed(metric)
        dt_max = cfl * min(probe.dx) / (speed * np.sqrt(domain.n))
        nt = max(8, int(np.ceil((domain.T - domain.t_start) / dt_max)))
        return cls(domain, nt, nx)

    @property
    def n(self):
        return self.domain.n

    @property
    def dt(self):
        return (self.domain.T - self.domain.t_start) / self.nt

    @property
    def dx(self):
        return tuple((hi - lo) / m for (lo, hi), m in zip(self.domain.bounds, self.nx))

    @property
    def t(self):
        return np.linspace(self.domain.t_start, self.domain.T, self.nt + 1)

    @property
    def axes(self):
        return [np.linspace(lo, hi, m + 1) for (lo, hi), m in zip(self.domain.bounds, self.nx)]

    @property
    def spatial_shape(self):
        return tuple(m + 1 for m in self.nx)

    @property
    def shape(self):
        return (self.nt + 1,) + self.spatial_shape

    def spatial_mesh(self):
        """Coordinates of the spatial nodes, shape ``spatial_shape + (n,)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def points_at(self, t):
        """Spacetime points of one time level."""
        xs = self.spatial_mesh()
        tt = np.full(xs.shape[:-1] + (1,), float(t))
        return np.concatenate([tt, xs], axis=-1)

    def points(self):
        """All grid events, shape ``shape + (n+1,)``."""
        xs = self.spatial_mesh()
        tt = np.broadcast_to(self.t.reshape((-1,) + (1,) * (self.n + 1)), self.shape + (1,))
        return np.concatenate([tt, np.broadcast_to(xs, self.shape + (self.n,))], axis=-1)

    def light_speed(self, metric, time_samples=9):
        """``sup sqrt(beta * lambda_max(h^-1))`` over a subsample of the grid."""
        speed = 0.0
        for t in np.linspace(self.domain.t_start, self.domain.T, time_samples):
            speed = max(speed, metric.max_speed(self.points_at(t)))
        return speed

    def cfl_number(self, metric):
        return self.dt * self.light_speed(metric) * np.sqrt(self.n) / min(self.dx)

    def check_cfl(self, metric, limit=MAX_CFL):
        c = self.cfl_number(metric)
        if c > limit + 1e-12:
            raise CFLError(f"CFL number {c:.4f} exceeds {limit}; increase nt or coarsen nx")
        return c

    def volume_weights(self):
        """Trapezoid weights in ``t`` and ``x`` (coordinate measure)."""
        w = _trapezoid_weights(self.nt + 1, self.dt)
        for num, h in zip(self.spatial_shape, self.dx):
            w = np.multiply.outer(w, _trapezoid_weights(num, h))
        return w

    def spatial_weights(self):
        w = np.ones(())
        for num, h in zip(self.spatial_shape, self.dx):
            w = np.multiply.outer(w, _trapezoid_weights(num, h))
        return w

    @functools.cached_property
    def sigma(self):
        n = self.n
        faces, idx, axis, side, weight, names = [], [], [], [], [], []
        axes = self.axes
        for a in range(n):
            for sgn, pos in ((-1, 0), (1, self.nx[a])):
                fid = len(names)
                names.append(f"x{a + 1}{'-' if sgn < 0 else '+'}")
                others = [b for b in range(n) if b != a]
                grids = np.meshgrid(*[np.arange(self.spatial_shape[b]) for b in others], indexing="ij")
                tw = np.ones(())
                for b in others:
                    tw = np.multiply.outer(tw, _trapezoid_weights(self.spatial_shape[b], self.dx[b]))
                count = int(np.prod([self.spatial_shape[b] for b in others])) if others else 1
                block = np.zeros((count, n), dtype=int)
                block[:, a] = pos
                for b, g in zip(others, grids):
                    block[:, b] = g.ravel()
                idx.append(block)
                faces.append(np.full(count, fid))
                axis.append(np.full(count, a))
                side.append(np.full(count, sgn))
                weight.append(np.ravel(tw) * np.ones(count))
        index = np.concatenate(idx)
        coords = np.stack([axes[b][index[:, b]] for b in range(n)], axis=1)
        return SigmaLayout(
            np.concatenate(faces),
            index,
            np.concatenate(axis),
            np.concatenate(side),
            np.concatenate(weight),
            coords,
            tuple(names),
        )

    def sigma_points(self):
        """Events of the lateral boundary nodes, shape ``(nt+1, n_sigma, n+1)``."""
        c = self.sigma.coords
        tt = np.broadcast_to(self.t[:, None, None], (self.nt + 1, c.shape[0], 1))
        return np.concatenate([tt, np.broadcast_to(c, (self.nt + 1,) + c.shape)], axis=-1)

    def refined(self, factor=2):
        return SpacetimeGrid(self.domain, self.nt * factor, tuple(m * factor for m in self.nx))

    def describe(self):
        return {
            "T": self.domain.T,
            "t_start": self.domain.t_start,
            "bounds": [list(b) for b in self.domain.bounds],
            "nt": self.nt,
            "nx": list(self.nx),
        }


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Values on every grid node.

    ``nonlinear`` optionally holds the part of ``values`` produced by the
    nonlinear iteration (the remainder being the solution of the linear
    problem with the same data).
    """

    grid: SpacetimeGrid
    values: np.ndarray
    nonlinear: np.ndarray = None

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError(f"field shape {self.values.shape} does not match grid {self.grid.shape}")

    def conj(self):
        nl = None if self.nonlinear is None else np.conj(self.nonlinear)
        return ScalarField(self.grid, np.conj(self.values), nl)

    def trace(self):
        return self.grid.sigma.take(self.values)


@dataclass(frozen=True, eq=False)
class LateralBoundaryData:
    """Dirichlet values on the lateral boundary nodes, shape ``(nt+1, n_sigma)``."""

    grid: SpacetimeGrid
    values: np.ndarray
    order: int = 2

    def __post_init__(self):
        if self.values.shape != (self.grid.nt + 1, self.grid.sigma.size):
            raise ValueError("boundary data shape does not match the grid")

    def __add__(self, other):
        return LateralBoundaryData(self.grid, self.values + other.values, self.order)

    def __mul__(self, c):
        return LateralBoundaryData(self.grid, c * self.values, self.order)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class TraceField:
    """Normal derivative on the lateral boundary nodes, shape ``(nt+1, n_sigma)``."""

    grid: SpacetimeGrid
    values: np.ndarray
    nonlinear: np.ndarray = None


@dataclass
class SolveReport:
    iterations: int = 0
    residual: float = 0.0
    residual_history: list = field(default_factory=list)
    contraction_ratios: list = field(default_factory=list)
    norm_history: list = field(default_factory=list)
    cfl: float = 0.0
    boundary_norm: float = 0.0
    c0_ratio: float = None


def grid_function(grid, fun):
    """Evaluate ``fun(points)`` on every grid node."""
    return np.asarray(fun(grid.points()))


def boundary_function(grid, fun):
    """Evaluate ``fun(points)`` on the lateral boundary nodes."""
    return LateralBoundaryData(grid, np.asarray(fun(grid.sigma_points())))


# --------------------------------------------------------------------------
# operator tables


def _values(x):
    if x is None:
        return None
    return x.values if hasattr(x, "values") else np.asarray(x)


@dataclass(eq=False)
class WaveOperator:
    """Coefficient tables of the divergence-form operator on one grid."""

    metric: MetricField
    grid: SpacetimeGrid
    static: bool
    A_half: np.ndarray  # sqrt|g|/beta at t_{k+1/2}, leading axis length 1 if static
    A0: np.ndarray
    dA0: np.ndarray
    B_half: list  # per axis, sqrt|g| h^aa at half nodes
    B_cross: dict  # (a, b) -> sqrt|g| h^ab at nodes, only for non-diagonal h
    w: np.ndarray  # sqrt|g| at nodes

    def level(self, arr, k):
        return arr[0] if self.static else arr[k]

    def divergence(self, u, k):
        """``d_i(sqrt|g| h^ij d_j u)`` at interior nodes of level ``k`` (zero on the boundary)."""
        out = np.zeros_like(u)
        dx = self.grid.dx
        n = self.grid.n
        inner = tuple(slice(1, -1) for _ in range(n))
        for a in range(n):
            B = self.level(self.B_half[a], k)
            flux = B * np.diff(u, axis=a) / dx[a]
            div = np.diff(flux, axis=a) / dx[a]
            take = [slice(1, -1)] * n
            take[a] = slice(None)
            out[inner] += div[tuple(take)]
        for (a, b), Bab in self.B_cross.items():
            Bk = self.level(Bab, k)
            grad_b = np.gradient(u, dx[b], axis=b)
            term = np.gradient(Bk * grad_b, dx[a], axis=a)
            out[inner] += term[inner]
        return out


def _coefficients(metric, points):
    beta = metric.beta_at(points)
    h = metric.h_at(points)
    sg = np.sqrt(beta * np.linalg.det(h))
    return beta, np.linalg.inv(h), sg


@functools.lru_cache(maxsize=32)
def wave_operator(metric, grid):
    """Tables for ``metric`` on ``grid``; cached so repeated solves share them."""
    n = grid.n
    static = bool(metric.static or metric.constant)
    t = grid.t
    dt = grid.dt
    half_times = t[:-1] + 0.5 * dt
    xs = grid.spatial_mesh()

    def pts(tt, xx):
        return np.concatenate([np.full(xx.shape[:-1] + (1,), tt), xx], axis=-1)

    def A_at(tt):
        beta, _, sg = _coefficients(metric, pts(tt, xs))
        return sg / beta

    times_half = half_times[:1] if static else half_times
    A_half = np.stack([A_at(tt) for tt in times_half])
    A0 = A_at(t[0])
    dA0 = np.zeros_like(A0) if static else (A_at(t[0] + 0.5 * dt) - A_at(t[0] - 0.5 * dt)) / dt

    times_node = t[:1] if static else t
    B_half = []
    for a in range(n):
        mids = 0.5 * (np.take(xs, np.arange(xs.shape[a] - 1), axis=a) + np.take(xs, np.arange(1, xs.shape[a]), axis=a))
        rows = []
        for tt in times_node:
            _, hinv, sg = _coefficients(metric, pts(tt, mids))
            rows.append(sg * hinv[..., a, a])
        B_half.append(np.stack(rows))
    w_rows, cross = [], {}
    for tt in times_node:
        _, hinv, sg = _coefficients(metric, pts(tt, xs))
        w_rows.append(sg)
        for a in range(n):
            for b in range(n):
                if a != b:
                    cross.setdefault((a, b), []).append(sg * hinv[..., a, b])
    B_cross = {k: np.stack(v) for k, v in cross.items() if np.max(np.abs(v)) > 0}
    return WaveOperator(metric, grid, static, A_half, A0, dA0, B_half, B_cross, np.stack(w_rows))


@functools.lru_cache(maxsize=32)
def sigma_weights(metric, grid):
    """Surface quadrature weights on the lateral boundary, shape ``(nt+1, n_sigma)``.

    The induced volume element on a face ``x_a = const`` is
    ``sqrt(beta det h')`` with ``h'`` the tangential block of ``h``.
    """
    sig = grid.sigma
    pts = grid.sigma_points()
    beta = metric.beta_at(pts)
    h = metric.h_at(pts)
    n = grid.n
    dens = np.empty(beta.shape)
    for a in range(n):
        mask = sig.axis == a
        keep = [b for b in range(n) if b != a]
        if keep:
            block = h[:, mask][..., keep, :][..., keep]
            dens[:, mask] = np.sqrt(beta[:, mask] * np.linalg.det(block))
        else:
            dens[:, mask] = np.sqrt(beta[:, mask])
    tw = _trapezoid_weights(grid.nt + 1, grid.dt)
    return dens * tw[:, None] * sig.weight[None, :]


@functools.lru_cache(maxsize=32)
def volume_density(metric, grid):
    """``sqrt|det g|`` times trapezoid weights on every node."""
    return metric.sqrt_det(grid.points()) * grid.volume_weights()


def integrate(metric, grid, values):
    """Quadrature of ``values dV_g`` over the whole grid."""
    return np.sum(values * volume_density(metric, grid))


def integrate_sigma(metric, grid, values):
    """Quadrature of ``values dS`` over the lateral boundary."""
    return np.sum(values * sigma_weights(metric, grid))


def l2_norm(values, grid):
    """Discrete L2 norm with the coordinate measure."""
    return float(np.sqrt(np.sum(np.abs(values) ** 2 * grid.volume_weights())))


def boundary_norm(metric, data):
    """Discrete L2(Sigma) norm of boundary samples."""
    vals = _values(data)
    grid = data.grid
    return float(np.sqrt(np.sum(np.abs(vals) ** 2 * sigma_weights(metric, grid))))


# --------------------------------------------------------------------------
# compatibility


@dataclass(frozen=True)
class CompatibilityResult:
    passed: bool
    failing_order: int = None
    defects: tuple = ()

    def __bool__(self):
        return self.passed


_FORWARD_STENCILS = {
    0: np.array([1.0]),
    1: np.array([-1.5, 2.0, -0.5]),
    2: np.array([2.0, -5.0, 4.0, -1.0]),
}


def compatibility_check(f, u0=None, u1=None, F=None, order=2, metric=None, rtol=1e-6):
    """Check ``d_t^k f(0) = d_t^k u(0)|_Sigma`` discretely for ``k <= order``.

    The prescribed values come from the Cauchy data (``k = 0, 1``) and from
    the equation (``k = 2``).  For zero Cauchy data and zero source they all
    vanish.  A defect counts when it exceeds ``rtol * max|f| / T^k``.

    Returns a :class:`CompatibilityResult`; failures are reported, not raised.
    """
    if order > 2:
        raise ValueError("compatibility is checked up to order 2")
    grid = f.grid
    vals = _values(f)
    sig = grid.sigma
    span = grid.domain.T - grid.domain.t_start
    u0v = _values(u0)
    u1v = _values(u1)
    Fv = _values(F)
    scale = max([float(np.max(np.abs(v))) for v in (vals, u0v, u1v) if v is not None and v.size] + [0.0])
    prescribed = {0: 0.0, 1: 0.0, 2: 0.0}
    if u0v is not None:
        prescribed[0] = sig.take(u0v)
    if u1v is not None:
        prescribed[1] = sig.take(u1v)
    if order >= 2 and (u0v is not None or u1v is not None or Fv is not None):
        if metric is None:
            raise ValueError("second-order compatibility with non-zero data needs the metric")
        op = wave_operator(metric, grid)
        acc = np.zeros(grid.spatial_shape, dtype=complex)
        if u0v is not None:
            acc = acc + _full_divergence(op, u0v, 0)
        if Fv is not None:
            acc = acc - op.w[0] * Fv[0]
        if u1v is not None:
            acc = acc - op.dA0 * u1v
        prescribed[2] = sig.take(acc / op.A0)
    defects = []
    for k in range(order + 1):
        st = _FORWARD_STENCILS[k]
        deriv = np.tensordot(st, vals[: len(st)], axes=(0, 0)) / grid.dt**k
        defect = float(np.max(np.abs(deriv - prescribed[k])))
        defects.append(defect)
        if defect > rtol * scale / span**k + 1e-14:
            return CompatibilityResult(False, k, tuple(defects))
    return CompatibilityResult(True, None, tuple(defects))


def _full_divergence(op, u, k):
    """Divergence including boundary rows via one-sided differences (used at t = 0 only)."""
    grid = op.grid
    out = np.zeros(grid.spatial_shape, dtype=complex)
    pts = grid.points_at(grid.t[k])
    _, hinv, sg = _coefficients(op.metric, pts)
    grads = [np.gradient(u, h, axis=a, edge_order=2) for a, h in enumerate(grid.dx)]
    for a in range(grid.n):
        flux = sum(sg * hinv[..., a, b] * grads[b] for b in range(grid.n))
        out += np.gradient(flux, grid.dx[a], axis=a, edge_order=2)
    return out


# --------------------------------------------------------------------------
# linear solves


def _march(op, F, f, u0, u1, dtype):
    grid = op.grid
    sig = grid.sigma
    nt = grid.nt
    dt2 = grid.dt**2
    bidx = tuple(sig.index.T)
    u = np.zeros(grid.shape, dtype=dtype)
    if u0 is not None:
        u[0] = u0
    if f is not None:
        u[0][bidx] = f[0]
    if nt == 0:
        return u
    acc = op.divergence(u[0], 0)
    if F is not None:
        acc = acc - op.level(op.w, 0) * F[0]
    if u1 is not None:
        acc = acc - op.dA0 * u1
        u[1] = u[0] + grid.dt * u1 + 0.5 * dt2 * acc / op.A0
    else:
        u[1] = u[0] + 0.5 * dt2 * acc / op.A0
    if f is not None:
        u[1][bidx] = f[1]
    static = op.static
    if static:
        A = op.A_half[0]
        inv_A = 1.0 / A
        w = op.w[0]
    for k in range(1, nt):
        rhs = op.divergence(u[k], k)
        if F is not None:
            rhs = rhs - (w if static else op.w[k]) * F[k]
        if static:
            u[k + 1] = 2 * u[k] - u[k - 1] + dt2 * inv_A * rhs
        else:
            Am, Ap = op.A_half[k - 1], op.A_half[k]
            u[k + 1] = u[k] + (Am / Ap) * (u[k] - u[k - 1]) + dt2 * rhs / Ap
        if f is not None:
            u[k + 1][bidx] = f[k + 1]
    return u


def solve_linear(metric, F, f, u0, u1, grid, compatibility_order=2, check=True):
    """Solve ``box_g u = F`` with ``u = f`` on the lateral boundary and Cauchy data ``(u0, u1)``.

    Parameters
    ----------
    metric : MetricField
    F : ScalarField or ndarray or None
        Source on all grid nodes.
    f : LateralBoundaryData or ndarray or None
        Dirichlet values, shape ``(nt+1, n_sigma)``.
    u0, u1 : ndarray or None
        Initial value and time derivative on the spatial nodes.
    grid : SpacetimeGrid
    compatibility_order : int
        Order of the discrete compatibility check on ``f``.
    check : bool
        Run the CFL and compatibility checks.

    Returns
    -------
    ScalarField
    """
    Fv, fv, u0v, u1v = (_values(x) for x in (F, f, u0, u1))
    if check:
        grid.check_cfl(metric)
        if fv is not None:
            data = f if isinstance(f, LateralBoundaryData) else LateralBoundaryData(grid, fv)
            res = compatibility_check(data, u0v, u1v, Fv, order=compatibility_order, metric=metric)
            if not res.passed:
                raise CompatibilityError(
                    f"boundary data violate the compatibility condition at order {res.failing_order}"
                )
    dtype = complex if any(x is not None and np.iscomplexobj(x) for x in (Fv, fv, u0v, u1v)) else float
    op = wave_operator(metric, grid)
    return ScalarField(grid, _march(op, Fv, fv, u0v, u1v, dtype))


@functools.lru_cache(maxsize=16)
def time_reflection(metric, T, t_start=0.0):
    """Metric pulled back by ``t -> T + t_start - t`` (unchanged for static metrics)."""
    if metric.static or metric.constant:
        return metric
    shift = T + t_start
    return MetricField(
        metric.spatial_dim,
        beta=lambda t, x: metric.beta(shift - np.asarray(t), x),
        h=lambda t, x: metric.h(shift - np.asarray(t), x),
        name=f"{metric.name} (time reflected)",
    )


def solve_linear_backward(metric, f, grid, F=None, check=True):
    """Solve with vanishing Cauchy data at the final time ``T``.

    The problem is reflected in time, solved forward and reflected back.
    """
    fv = _values(f)
    Fv = _values(F)
    refl = time_reflection(metric, grid.domain.T, grid.domain.t_start)
    fr = None if fv is None else fv[::-1].copy()
    Fr = None if Fv is None else Fv[::-1].copy()
    u = solve_linear(refl, Fr, fr, None, None, grid, check=check)
    return ScalarField(grid, u.values[::-1].copy())


def discrete_residual(metric, u, F, grid):
    """Residual of the scheme, ``box_g u - F`` on interior nodes of levels ``1..nt-1``."""
    op = wave_operator(metric, grid)
    uv = _values(u)
    Fv = _values(F)
    out = np.zeros(grid.shape, dtype=complex if np.iscomplexobj(uv) or np.iscomplexobj(Fv) else float)
    dt2 = grid.dt**2
    inner = (slice(None),) + tuple(slice(1, -1) for _ in range(grid.n))
    for k in range(1, grid.nt):
        Am = op.A_half[0] if op.static else op.A_half[k - 1]
        Ap = op.A_half[0] if op.static else op.A_half[k]
        w = op.level(op.w, k)
        lhs = (Ap * (uv[k + 1] - uv[k]) - Am * (uv[k] - uv[k - 1])) / dt2
        res = (-lhs + op.divergence(uv[k], k)) / w
        if Fv is not None:
            res = res - Fv[k]
        out[k][inner[1:]] = res[inner[1:]]
    return ScalarField(grid, out)


# --------------------------------------------------------------------------
# normal derivative and semilinear solves


def normal_derivative(metric, u, grid):
    """Outward ``h``-normal derivative on the lateral boundary nodes.

    Derivatives along the normal axis use the one-sided three-point stencil;
    tangential ones (needed only for non-diagonal ``h``) use second-order
    differences along the face.
    """
    uv = _values(u)
    sig = grid.sigma
    pts = grid.sigma_points()
    hinv = np.linalg.inv(metric.h_at(pts))  # (nt+1, n_sigma, n, n)
    n = grid.n
    out = np.zeros((grid.nt + 1, sig.size), dtype=uv.dtype)
    for a in range(n):
        mask = sig.axis == a
        sub = sig.index[mask]
        side = sig.side[mask]
        grads = []
        for b in range(n):
            if b == a:
                g = np.empty((grid.nt + 1, sub.shape[0]), dtype=uv.dtype)
                for sgn in (-1, 1):
                    sel = side == sgn
                    if not np.any(sel):
                        continue
                    base = sub[sel]
                    k = -sgn  # step into the domain
                    vals = []
                    for j in range(3):
                        ix = base.copy()
                        ix[:, a] = base[:, a] + k * j
                        vals.append(uv[(slice(None),) + tuple(ix.T)])
                    g[:, sel] = k * (-1.5 * vals[0] + 2.0 * vals[1] - 0.5 * vals[2]) / grid.dx[a]
                grads.append(g)
            else:
                full = np.gradient(uv, grid.dx[b], axis=b + 1, edge_order=2)
                grads.append(full[(slice(None),) + tuple(sub.T)])
        grads = np.stack(grads, axis=-1)  # (nt+1, count, n)
        hi = hinv[:, mask]
        flux = np.einsum("tcb,tcb->tc", hi[..., a, :], grads)
        out[:, mask] = side[None, :] * flux / np.sqrt(hi[..., a, a])
    return out


def _as_q(q, grid):
    if q is None:
        return None
    qv = _values(q)
    if np.isscalar(qv) or qv.ndim == 0:
        return np.full(grid.shape, float(qv))
    return qv


def solve_semilinear(
    metric,
    q,
    m,
    f,
    grid,
    tol=1e-10,
    max_iter=50,
    kappa=1e-2,
    c0=None,
    linear_part=None,
    check=True,
):
    """Solve ``box_g u + q u^m = 0`` with lateral data ``f`` and zero Cauchy data.

    The solution is split as ``u = u_lin + u_nl`` where ``u_lin`` solves the
    linear problem with data ``f`` and ``u_nl`` solves
    ``box_g u_nl = -q (u_lin + u_nl)^m`` with zero data by Picard iteration.
    This is the same iteration as Picard on ``u`` itself but keeps the small
    nonlinear part free of cancellation, which matters when mixed
    differences divide by products of tiny weights.

    The iteration stops when the relative increment
    ``||u_nl^(k) - u_nl^(k-1)|| / ||u^(k)||`` drops to ``tol``.

    Parameters
    ----------
    linear_part : ScalarField, optional
        Precomputed ``u_lin``; avoids a linear solve when the caller already
        has it (e.g. as a combination of earlier solutions).
    kappa : float or None
        Smallness threshold on ``||f||_{L2(Sigma)}``; ``None`` disables it.
    c0 : float, optional
        When given, ``||u||_{L2} <= c0 ||f||_{L2(Sigma)}`` is enforced.

    Returns
    -------
    (ScalarField, SolveReport)
        The field carries ``u_nl`` as ``nonlinear``.
    """
    if m < 2:
        raise ValueError("nonlinearity power must be at least 2")
    report = SolveReport()
    if check:
        report.cfl = grid.check_cfl(metric)
    if f is not None:
        data = f if isinstance(f, LateralBoundaryData) else LateralBoundaryData(grid, _values(f))
        report.boundary_norm = boundary_norm(metric, data)
        if kappa is not None and report.boundary_norm > kappa:
            raise SmallnessError(
                f"boundary data norm {report.boundary_norm:.3g} exceeds the smallness threshold {kappa:.3g}"
            )
    if linear_part is None:
        u_lin = solve_linear(metric, None, f, None, None, grid, check=check).values
    else:
        u_lin = _values(linear_part)
    qv = _as_q(q, grid)
    op = wave_operator(metric, grid)
    u_nl = np.zeros(grid.shape, dtype=complex if np.iscomplexobj(u_lin) or np.iscomplexobj(qv) else float)
    if qv is None or not np.any(qv):
        report.iterations = 1
        report.norm_history.append(l2_norm(u_lin, grid))
        return ScalarField(grid, u_lin.copy(), u_nl), report
    growth = 0
    prev = None
    for k in range(1, max_iter + 1):
        src = -qv * (u_lin + u_nl) ** m
        new = _march(op, src, None, None, None, u_nl.dtype)
        if not np.all(np.isfinite(new)):
            raise DivergenceError("Picard iterate is not finite; boundary data too large")
        inc = l2_norm(new - u_nl, grid)
        total = l2_norm(u_lin + new, grid)
        res = inc / total if total > 0 else inc
        u_nl = new
        report.residual_history.append(res)
        report.norm_history.append(total)
        if prev is not None and prev > 0:
            report.contraction_ratios.append(res / prev)
            growth = growth + 1 if res > prev else 0
            if growth >= 3:
                raise DivergenceError(
                    f"Picard residual grew for 3 consecutive iterations (last {res:.3g}); boundary data too large"
                )
        prev = res
        if res <= tol:
            report.iterations = k
            report.residual = res
            break
    else:
        raise ConvergenceError(f"Picard iteration did not reach {tol:g} in {max_iter} iterations (last {prev:.3g})")
    u = u_lin + u_nl
    if c0 is not None and report.boundary_norm > 0:
        report.c0_ratio = l2_norm(u, grid) / report.boundary_norm
        if report.c0_ratio > c0:
            raise SmallnessError(f"solution bound ||u|| <= C0 ||f|| violated (ratio {report.c0_ratio:.3g} > {c0})")
    logger.debug("semilinear solve converged in %d iterations (residual %.2e)", report.iterations, report.residual)
    return ScalarField(grid, u, u_nl), report


def dn_map(metric, q, m, f, grid, **kwargs):
    """Numerical Dirichlet-to-Neumann map ``f -> d_nu u_f`` on the lateral boundary.

    Keyword arguments are passed to :func:`solve_semilinear`.  The returned
    trace keeps the normal derivative of the nonlinear part separately.
    """
    u, _ = solve_semilinear(metric, q, m, f, grid, **kwargs)
    vals = normal_derivative(metric, u.values, grid)
    nl = normal_derivative(metric, u.nonlinear, grid)
    return TraceField(grid, vals, nl)


# --------------------------------------------------------------------------
# norms


def energy_norm(field, order, grid=None):
    """Discrete energy norm ``sup_t sum_{k<=s} ||d_t^k u(t)||_{H^{s-k}}``.

    Time and space derivatives are second-order differences; spatial norms
    use trapezoid weights with the coordinate measure.
    """
    if order > 2 or order < 0:
        raise ValueError("energy norms are available for orders 0, 1 and 2")
    uv = _values(field)
    grid = grid if grid is not None else field.grid
    wx = grid.spatial_weights()
    n = grid.n
    total = np.zeros(grid.nt + 1)
    dt_derivs = [uv]
    for _ in range(order):
        dt_derivs.append(np.gradient(dt_derivs[-1], grid.dt, axis=0, edge_order=2))

    def sobolev_sq(v, j):
        acc = np.sum(np.abs(v) ** 2 * wx, axis=tuple(range(1, n + 1)))
        layer = [v]
        for _ in range(j):
            nxt = []
            for w in layer:
                for a in range(n):
                    d = np.gradient(w, grid.dx[a], axis=a + 1, edge_order=2)
                    nxt.append(d)
                    acc = acc + np.sum(np.abs(d) ** 2 * wx, axis=tuple(range(1, n + 1)))
            layer = nxt
        return acc

    for k in range(order + 1):
        total = total + np.sqrt(sobolev_sq(dt_derivs[k], order - k))
    return float(np.max(total))
