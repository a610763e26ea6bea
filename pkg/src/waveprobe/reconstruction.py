"""Pointwise recovery of the potential from DN data.

The pipeline at one target event ``p0``:

1. two null geodesics through ``p0`` (one boundary optimal, one rotated),
   Gaussian beams along them and their conjugates as probe inputs;
2. an auxiliary solution ``v0`` with zero Cauchy data at ``t = T`` built
   from a past-directed boundary-optimal beam;
3. the integral identity pairs ``v0`` with the mixed difference of the DN
   map, and the Gaussian concentration of ``v1 v2 v3 v4`` at ``p0``
   turns that number into ``q(p0)``.

Also here: the Hölder exponent, the parameter optimizer, separation
matrices for several intersection points and the noisy stability sweep.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats
from scipy.interpolate import RegularGridInterpolator
from scipy.special import gammaln

from .errors import (
    CauchySurfaceError,
    NoBoundaryHitError,
    PositivityError,
    ProbeError,
    SeparationError,
    WaveprobeError,
)
from .gaussian_beam import _check_cauchy, beam_through, conjugate_beam, correct_beam, phase_hessian
from .geometry import as_point, boundary_optimal_geodesic, intersections, null_vector
from .linearization import DnOperator, DnProbe, mixed_finite_difference, sign_patterns
from .wave_solver import (
    LateralBoundaryData,
    ScalarField,
    SpacetimeGrid,
    TraceField,
    compatibility_check,
    integrate,
    integrate_sigma,
    sigma_weights,
    solve_linear,
    solve_linear_backward,
)

logger = logging.getLogger(__name__)

VHAT_FLOOR = 0.5
DET_FLOOR = 1e-12
ANGLE_THRESHOLD = 1e-2


# --------------------------------------------------------------------------
# exponent and parameter choice


def sigma(s, m, n):
    """Hölder exponent ``8(m-1) / (2m(m-1)(8s-n+13) + 2m-1)`` as a :class:`Fraction`.

    Raises
    ------
    ValueError
        Unless ``s + 1 > (n+1)/2`` and ``m >= 4``.
    """
    if int(s) != s or int(m) != m or int(n) != n:
        raise ValueError("s, m and n must be integers")
    s, m, n = int(s), int(m), int(n)
    if m < 4:
        raise ValueError("the exponent needs m >= 4")
    if n < 1:
        raise ValueError("the spatial dimension must be positive")
    if 2 * (s + 1) <= n + 1:
        raise ValueError("the exponent needs s + 1 > (n + 1)/2")
    return Fraction(8 * (m - 1), 2 * m * (m - 1) * (8 * s - n + 13) + 2 * m - 1)


def effective_order(s, m, n):
    """``s_hat = (2m-1)(s - n/8 + 13/8)``."""
    return (2 * m - 1) * (s - n / 8 + 13 / 8)


def objective(eps, tau, m, s, n, delta, M=1.0, kappa0=1.0):
    """Error bound ``2 tau^-1/2 + (gamma0 delta/m) eps^-m + eps^(m-1) tau^s_hat/(m-1)``."""
    s_hat = effective_order(s, m, n)
    gamma0 = kappa0 ** (2 * m - 1) / M
    eps = np.asarray(eps, dtype=float)
    tau = np.asarray(tau, dtype=float)
    return (
        2 * tau**-0.5
        + gamma0 * delta / m * eps ** (-m)
        + eps ** (m - 1) * tau**s_hat / (m - 1)
    )


@dataclass(frozen=True)
class OptimalParams:
    eps: float
    tau: float
    kappa0: float
    halvings: int
    s_hat: float
    m: int

    @property
    def constraint(self):
        """``eps tau^(s_hat/(2m-1))``, to be compared with ``kappa``."""
        return self.eps * self.tau ** (self.s_hat / (2 * self.m - 1))


def critical_point(m, s, n, delta, M=1.0, kappa0=1.0):
    """Closed-form critical point ``(eps, tau)`` of :func:`objective`."""
    s_hat = effective_order(s, m, n)
    gd = kappa0 ** (2 * m - 1) / M * delta
    den = 2 * s_hat * m + 2 * m - 1
    ratio = (m - 1) / s_hat
    log_gd = math.log(gd)
    log_tau = 2 * (2 * m - 1) / den * math.log(ratio) - 2 * (m - 1) / den * log_gd
    log_eps = -2 * s_hat / den * math.log(ratio) + (4 * s_hat * m + 2 * m - 1 - 2 * s_hat) / (
        den * (2 * m - 1)
    ) * log_gd
    return math.exp(log_eps), math.exp(log_tau)


def optimal_params(m, s, n, delta, M=1.0, kappa=0.9, tau0=40.0, max_halvings=400):
    """Optimized probe weight and frequency for a noise level ``delta``.

    ``kappa0`` starts at ``kappa`` and is halved until ``tau >= tau0`` and
    ``eps tau^(s_hat/(2m-1)) <= kappa``.

    Returns
    -------
    OptimalParams
    """
    if not 0 < delta < M:
        raise ValueError("delta must lie in (0, M)")
    if not 0 < kappa < 1:
        raise ValueError("kappa must lie in (0, 1)")
    if m < 2:
        raise ValueError("m must be at least 2")
    s_hat = effective_order(s, m, n)
    kappa0 = kappa
    for k in range(max_halvings):
        eps, tau = critical_point(m, s, n, delta, M, kappa0)
        lhs = eps * tau ** (s_hat / (2 * m - 1))
        if tau >= tau0 and lhs <= kappa:
            return OptimalParams(eps, tau, kappa0, k, s_hat, m)
        kappa0 /= 2
    raise ValueError("no admissible kappa0 found")


# --------------------------------------------------------------------------
# Gaussian concentration


def gamma_ratio(d):
    """``c_d = Gamma((d+1)/2) / Gamma(d/2)``."""
    return math.exp(gammaln((d + 1) / 2) - gammaln(d / 2))


@dataclass(frozen=True)
class C1Bump:
    """``amplitude (1 - |z-c|^2/r^2)^2`` inside the ball, zero outside (a C^1 function)."""

    center: tuple
    radius: float
    amplitude: float = 1.0

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        r2 = np.sum((z - np.asarray(self.center)) ** 2, axis=-1) / self.radius**2
        return self.amplitude * np.where(r2 < 1, (1 - r2) ** 2, 0.0)

    def c1_norm(self):
        # sup|b| + sup|grad b|; |grad| = 4 A rho (1 - rho^2) / r peaks at rho = 1/sqrt 3
        rho = 1 / math.sqrt(3)
        return abs(self.amplitude) * (1 + 4 * rho * (1 - rho**2) / self.radius)

    @classmethod
    def random(cls, rng, d):
        center = tuple(rng.uniform(-0.3, 0.3, size=d))
        return cls(center, float(rng.uniform(0.4, 1.0)), float(rng.uniform(0.5, 2.0)))


def gaussian_average(b, z0, tau, nodes=801, width=9.0):
    """``(tau/pi)^(d/2) int b(z) exp(-tau |z - z0|^2) dz`` by a tensor trapezoid rule."""
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    d = len(z0)
    half = width / math.sqrt(tau)
    axis = np.linspace(-half, half, nodes)
    w1 = np.full(nodes, axis[1] - axis[0])
    w1[[0, -1]] *= 0.5
    mesh = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1)
    weight = np.ones(mesh.shape[:-1])
    for k in range(d):
        shape = [1] * d
        shape[k] = nodes
        weight = weight * w1.reshape(shape)
    r2 = np.sum(mesh**2, axis=-1)
    vals = b(mesh + z0) * np.exp(-tau * r2)
    return float((tau / math.pi) ** (d / 2) * np.sum(vals * weight))


def concentration_check(b, z0, tau, d=None):
    """Return ``(error, bound)`` for ``|b(z0) - gaussian_average|`` against ``c_d |b|_C1 tau^-1/2``."""
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    d = len(z0) if d is None else d
    err = abs(float(b(z0)) - gaussian_average(b, z0, tau))
    return err, gamma_ratio(d) * b.c1_norm() * tau**-0.5


# --------------------------------------------------------------------------
# potentials and scenarios


@dataclass(frozen=True)
class GaussianBump:
    center: tuple
    width: float
    amplitude: float = 1.0


@dataclass(frozen=True)
class BumpPotential:
    """``q = sum_k a_k exp(-|x - c_k|^2 / w_k)`` in ``(t, x)`` coordinates."""

    bumps: tuple = ()

    def __call__(self, points):
        pts = np.asarray(points, dtype=float)
        out = np.zeros(pts.shape[:-1])
        for b in self.bumps:
            r2 = np.sum((pts - np.asarray(b.center)) ** 2, axis=-1)
            out = out + b.amplitude * np.exp(-r2 / b.width)
        return out

    def scaled(self, c):
        return BumpPotential(tuple(GaussianBump(b.center, b.width, c * b.amplitude) for b in self.bumps))

    def max_abs(self, points):
        return float(np.max(np.abs(self(points))))


@dataclass(frozen=True, eq=False)
class ProbeSettings:
    """Beam and grid choices shared by every target point.

    ``beam_width`` sets ``H0 = i beam_width I`` for the probe beams;
    ``nodes_per_wavelength`` fixes the grid through the largest ``tau``.
    ``transverse_cutoff`` widens the tube in the chart coordinates
    ``y_2..y_n``; the Gaussian profile spreads in those directions away
    from the waist while ``cutoff_radius`` keeps the ``y_1`` extent (and so
    the time support) tight.
    """

    cutoff_radius: float = 0.3
    transverse_cutoff: float = None
    beam_width: float = 4.0
    aux_tau: float = 2.0
    aux_cutoff: float = 0.3
    rotation: float = 0.2
    nodes_per_wavelength: float = 20.0
    cfl: float = 0.9
    min_nodes: int = 16

    def beam_radius(self, n):
        if self.transverse_cutoff is None or n == 1:
            return self.cutoff_radius
        return (self.cutoff_radius,) + (self.transverse_cutoff,) * (n - 1)

    def grid(self, metric, domain, tau):
        # the beam oscillates like exp(i tau y1) with |d y1| ~ 1/2 per unit length
        wavelength = 4 * math.pi / tau
        extent = max(hi - lo for lo, hi in domain.bounds)
        nx = max(self.min_nodes, int(math.ceil(self.nodes_per_wavelength * extent / wavelength)))
        return SpacetimeGrid.for_metric(domain, nx, metric, cfl=self.cfl)


# --------------------------------------------------------------------------
# probe bundles


def interpolate_at(field, point):
    """Multilinear interpolation of a grid field at one event."""
    grid = field.grid
    axes = (grid.t,) + tuple(grid.axes)
    vals = field.values
    it = RegularGridInterpolator(axes, vals)
    return complex(it(as_point(point)[None, :])[0])


def recovery_set(metric, domain, points):
    """Events where both the past and future boundary-optimal searches succeed."""
    keep = []
    for p in points:
        try:
            boundary_optimal_geodesic(metric, domain, p, "future")
            boundary_optimal_geodesic(metric, domain, p, "past")
        except NoBoundaryHitError:
            continue
        keep.append(p)
    return keep


def _rotate(direction, angle):
    w = np.asarray(direction, dtype=float)
    n = len(w)
    if n == 1:
        return -w
    if n == 2:
        c, s = math.cos(angle), math.sin(angle)
        return np.array([c * w[0] - s * w[1], s * w[0] + c * w[1]])
    # rotate within the plane of w and the coordinate axis least aligned with it
    e = np.zeros(n)
    e[int(np.argmin(np.abs(w)))] = 1.0
    u = e - (e @ w) / (w @ w) * w
    u = u / np.linalg.norm(u) * np.linalg.norm(w)
    return math.cos(angle) * w + math.sin(angle) * u


def _tangent_angle(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    c = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return math.acos(max(-1.0, min(1.0, c)))


@dataclass(frozen=True, eq=False)
class ProbeBundle:
    """Everything the pointwise recovery at ``p0`` needs.

    ``beams`` are the quasimodes ``v_tau,1..v_tau,m`` (fixed beams last);
    ``inputs`` their scaled boundary traces and ``linear_solutions`` the
    exact discrete solutions with those traces.
    """

    p0: np.ndarray
    tau: float
    tau0: float
    m: int
    grid: SpacetimeGrid
    geodesics: tuple
    velocities: tuple
    beams: tuple
    inputs: tuple
    linear_solutions: tuple
    aux_beam: object
    v0: ScalarField
    v0_value: complex
    vhat_value: complex
    hessian: np.ndarray
    hessian_det: float
    tangent_angle: float

    @property
    def n(self):
        return self.grid.n

    def probe(self, eps):
        return DnProbe(self.inputs, eps, self.m, self.linear_solutions)


def _fixed_beams(metric, domain, p0, velocity, tau0, count, grid, settings):
    """``count`` beams at ``tau0`` along ``velocity`` normalized to one at ``p0``.

    They come in conjugate pairs so the product is close to ``|v|^2`` near
    ``p0``.  ``tau0`` is doubled until the corrected product has modulus
    at least ``VHAT_FLOOR`` at ``p0``.
    """
    if count == 0:
        return [], [], 1.0 + 0j, tau0
    tau_fixed = tau0
    for _ in range(6):
        base = beam_through(metric, domain, p0, velocity, tau_fixed, settings.beam_radius(domain.n))
        val = complex(base.evaluate(as_point(p0)[None, :])[0])
        base = base.scaled(1.0 / val)
        beams = [base if k % 2 == 0 else conjugate_beam(base) for k in range(count)]
        sols = [solve_linear(metric, None, b.boundary_data(grid), None, None, grid) for b in beams]
        vhat = complex(np.prod([interpolate_at(v, p0) for v in sols]))
        if abs(vhat) >= VHAT_FLOOR:
            return beams, sols, vhat, tau_fixed
        tau_fixed *= 2
    raise ProbeError(f"fixed beams give |v_hat(p0)| = {abs(vhat):.3g} below {VHAT_FLOOR}")


def build_probe(metric, domain, p0, tau, tau0, m, grid=None, settings=None, check=True):
    """Assemble probe beams and the auxiliary solution at ``p0``.

    Raises
    ------
    NoBoundaryHitError
        ``p0`` lies outside the numerical recovery set.
    ProbeError
        Degenerate tangents after one enlarged rotation, or small ``v_hat``.
    """
    settings = settings or ProbeSettings()
    if m < 4:
        raise ValueError("the probe construction needs m >= 4")
    p0 = as_point(p0)
    if grid is None:
        grid = settings.grid(metric, domain, tau)
    fut = boundary_optimal_geodesic(metric, domain, p0, "future")
    past = boundary_optimal_geodesic(metric, domain, p0, "past")
    n = domain.n
    H0 = 1j * settings.beam_width * np.eye(n)

    vel1 = fut.velocity
    angle = settings.rotation
    for attempt in range(2):
        w2 = _rotate(fut.spatial_direction, angle)
        vel2 = null_vector(metric, p0, w2, future=True)
        tangent_angle = _tangent_angle(fut.spatial_direction, w2)
        b1 = beam_through(metric, domain, p0, vel1, tau, settings.beam_radius(n), H0=H0)
        b2 = beam_through(metric, domain, p0, vel2, tau, settings.beam_radius(n), H0=H0)
        try:
            if tangent_angle < ANGLE_THRESHOLD:
                raise ProbeError("tangent angle below threshold")
            Hz, det = phase_hessian(b1, b2, p0)
            break
        except (ProbeError, PositivityError) as exc:
            if attempt == 1:
                raise ProbeError(f"degenerate probe geodesics at {p0}: {exc}") from exc
            angle *= 2
            logger.info("retrying probe at %s with rotation %.3g", p0, angle)
    if det < DET_FLOOR:
        raise ProbeError(f"phase Hessian determinant {det:.3g} below floor")

    main = [b1, b2, conjugate_beam(b1), conjugate_beam(b2)]
    scale = tau ** 0.125
    inputs = []
    sols = []
    for b in main:
        if check:
            v = b.on_grid(grid).values
            _check_cauchy(v, "forward", float(np.max(np.abs(v))))
        f = b.boundary_data(grid) * scale
        if check:
            res = compatibility_check(f, order=2, metric=metric)
            if not res:
                raise ProbeError(f"probe trace fails compatibility: {res}")
        inputs.append(f)
        sols.append(solve_linear(metric, None, f, None, None, grid, check=False))
    fixed, fixed_sols, vhat, _ = _fixed_beams(metric, domain, p0, vel1, tau0, m - 4, grid, settings)
    inputs += [b.boundary_data(grid) for b in fixed]
    sols += fixed_sols

    # auxiliary solution along the past boundary-optimal geodesic
    aux = beam_through(metric, domain, p0, -past.velocity, settings.aux_tau, settings.aux_cutoff)
    corrected = correct_beam(aux, "backward", grid, residual="discrete")
    v0 = corrected.combined
    v0p = interpolate_at(v0, p0)
    if abs(v0p) < 1e-8:
        raise ProbeError("auxiliary solution vanishes at the target")
    v0 = ScalarField(grid, v0.values / v0p)
    if check:
        tail = np.max(np.abs(v0.values[-2:]))
        if tail > 1e-10 * np.max(np.abs(v0.values)):
            raise CauchySurfaceError("auxiliary solution has nonzero final data")
    return ProbeBundle(
        p0=p0,
        tau=float(tau),
        tau0=float(tau0),
        m=m,
        grid=grid,
        geodesics=(fut, past),
        velocities=(vel1, vel2),
        beams=tuple(main + fixed),
        inputs=tuple(inputs),
        linear_solutions=tuple(sols),
        aux_beam=aux,
        v0=v0,
        v0_value=complex(interpolate_at(v0, p0)),
        vhat_value=vhat,
        hessian=Hz,
        hessian_det=det,
        tangent_angle=tangent_angle,
    )


def concentration_constant(bundle, constant="gaussian"):
    """``m! C v0(p0) v_hat(p0) |det H|^-1/2`` with ``C = (2 pi)^(d/2)`` or ``pi^(d/2)``.

    ``'gaussian'`` is the value of ``int exp(-z.Hz/2) dz`` for the product
    ``|v1|^2 |v2|^2`` as built here; ``'literal'`` keeps ``pi^(d/2)``.
    """
    d = bundle.n + 1
    base = {"gaussian": 2 * math.pi, "literal": math.pi}[constant]
    return (
        math.factorial(bundle.m)
        * base ** (d / 2)
        * bundle.v0_value
        * bundle.vhat_value
        * bundle.hessian_det ** -0.5
    )


def recover_point(identity_rhs, bundle, m=None, constant="gaussian"):
    """Estimate ``q(p0)`` from the boundary side of the integral identity."""
    m = bundle.m if m is None else m
    if m != bundle.m:
        raise ValueError("m does not match the probe bundle")
    if abs(bundle.vhat_value) < VHAT_FLOOR:
        raise ProbeError("v_hat(p0) below floor")
    if bundle.hessian_det < DET_FLOOR:
        raise ProbeError("phase Hessian determinant below floor")
    return complex(-identity_rhs / concentration_constant(bundle, constant))


@dataclass(frozen=True)
class Calibration:
    """Quadrature of ``m! q v0 v1..vm`` over the predicted concentration value."""

    tau: float
    ratio: complex
    ratio_literal: complex
    offset: float


def calibration(metric, q, bundle):
    """Verification-mode check of the recovery constant at ``bundle.p0``."""
    grid = bundle.grid
    qv = q(grid.points()) if callable(q) else np.asarray(q)
    prod = bundle.v0.values * qv
    for v in bundle.linear_solutions:
        prod = prod * v.values
    quad = math.factorial(bundle.m) * complex(integrate(metric, grid, prod))
    q0 = float(q(bundle.p0[None, :])[0]) if callable(q) else interpolate_at(ScalarField(grid, qv), bundle.p0)
    ratio = quad / (q0 * concentration_constant(bundle, "gaussian"))
    literal = quad / (q0 * concentration_constant(bundle, "literal"))
    return Calibration(bundle.tau, ratio, literal, 2 ** ((bundle.n + 1) / 2))


# --------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseModel:
    """Additive complex Gaussian noise on the boundary trace nodes.

    Each draw is rescaled to have discrete ``L2(Sigma)`` norm exactly
    ``delta``.  Draws depend on ``(seed, key)`` only, so sweeps over
    ``delta`` reuse the same realizations.
    """

    seed: int = 0

    def draw(self, metric, grid, delta, key):
        rng = np.random.default_rng([self.seed] + [int(k) for k in key])
        shape = (grid.nt + 1, grid.sigma.size)
        z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        norm = math.sqrt(float(np.sum(np.abs(z) ** 2 * sigma_weights(metric, grid))))
        return z * (delta / norm)


def noisy_mixed_difference(clean, probe, metric, noise, delta, key=()):
    """Mixed difference of DN traces each perturbed by noise of norm ``delta``.

    The differences are linear in the traces, so the perturbation is added
    to the clean difference as ``sum_sigma sign_sigma n_sigma / prod eps``.
    """
    if noise is None or delta == 0:
        return clean
    grid = probe.grid
    total = np.zeros_like(clean.values)
    for idx, (_, sign) in enumerate(sign_patterns(probe.m)):
        total = total + sign * noise.draw(metric, grid, delta, tuple(key) + (idx,))
    return TraceField(grid, clean.values + total / float(np.prod(probe.eps)))


# --------------------------------------------------------------------------
# pointwise pipeline


@dataclass(frozen=True)
class PointRecovery:
    """One recovered value.

    The potential is real, so the estimate is ``Re q_hat``; the imaginary
    part is a finite-frequency artifact and is kept for diagnostics.
    """

    point: tuple
    q_true: float
    q_hat: complex
    tau: float
    eps: float
    rhs: complex
    error: str = ""

    @property
    def estimate(self):
        return self.q_hat.real

    @property
    def abs_err(self):
        return abs(self.estimate - self.q_true) if not self.error else float("nan")

    @property
    def complex_err(self):
        return abs(self.q_hat - self.q_true) if not self.error else float("nan")


def recover_at(metric, domain, q, p0, eps, tau, tau0, m, grid, settings=None, noise=None, delta=0.0, key=()):
    """Verification-mode recovery at one event with DN data of the potential ``q``."""
    bundle = build_probe(metric, domain, p0, tau, tau0, m, grid, settings)
    probe = bundle.probe(eps)
    qv = q(grid.points())
    dn = DnOperator(metric, qv, m, grid, kappa=None)
    mixed = mixed_finite_difference(dn, probe)
    mixed = noisy_mixed_difference(mixed, probe, metric, noise, delta, key)
    rhs = complex(integrate_sigma(metric, grid, grid.sigma.take(bundle.v0.values) * mixed.values))
    q_hat = recover_point(rhs, bundle, m)
    return PointRecovery(tuple(bundle.p0), float(q(bundle.p0[None, :])[0]), q_hat, tau, eps, rhs)


# --------------------------------------------------------------------------
# separation of several points


def check_intersection_cap(path1, path2, P, **kwargs):
    """Intersection events of two paths; more than ``P`` raises :class:`IntersectionBoundError`."""
    return intersections(path1, path2, cap=P, **kwargs)


def causal_order(points):
    """Sort events by time (then space), which respects the causal order."""
    return sorted((as_point(p) for p in points), key=lambda p: tuple(p))


def _meets(beam, points, tol):
    """True if the beam axis passes within chart distance ``tol`` of any event."""
    if not len(points):
        return False
    _, y, _ = beam.coordinates(np.array(points))
    r = np.linalg.norm(y, axis=-1)
    return bool(np.any(np.isfinite(r) & (r < tol)))


def _separating_beam(metric, domain, point, tau, cutoff_radius, avoid=(), alternate=False, axis_tol=1e-3):
    """Past-directed boundary-optimal beam through ``point`` normalized to one there.

    If its geodesic also meets an event in ``avoid``, the direction is
    changed: the other null direction in one space dimension, a small
    rotation otherwise.  ``alternate=True`` skips the optimal direction.
    """
    hit = boundary_optimal_geodesic(metric, domain, point, "past")
    w = -hit.spatial_direction
    tries = [] if alternate else [w]
    if domain.n == 1:
        tries.append(-w)
    else:
        tries += [_rotate(w, a) for a in (0.15, -0.15, 0.3, -0.3)]
    avoid = [as_point(a) for a in avoid]
    for direction in tries:
        vel = null_vector(metric, point, direction, future=True)
        try:
            beam = beam_through(metric, domain, point, vel, tau, cutoff_radius)
        except WaveprobeError:
            continue
        if _meets(beam, avoid, axis_tol):
            continue
        val = complex(beam.evaluate(as_point(point)[None, :])[0])
        return beam.scaled(1.0 / val)
    raise SeparationError(f"no separating beam through {as_point(point)}")


@dataclass(frozen=True, eq=False)
class SeparationMatrix:
    """Entries ``A[k, l] = v_k(x_l)`` for causally ordered points."""

    points: tuple
    beams: tuple
    entries: np.ndarray
    tau_sep: float

    @property
    def determinant(self):
        return complex(np.linalg.det(self.entries))

    @property
    def condition(self):
        return float(np.linalg.cond(self.entries))

    @property
    def upper_max(self):
        """Largest modulus above the diagonal."""
        A = self.entries
        iu = np.triu_indices(len(A), 1)
        return float(np.max(np.abs(A[iu]))) if len(iu[0]) else 0.0


def _entries(beams, points, grid=None, corrected=None):
    pts = np.array([as_point(p) for p in points])
    if corrected is None:
        return np.array([b.evaluate(pts) for b in beams])
    return np.array([[interpolate_at(c, p) for p in pts] for c in corrected])


def separation_matrix(metric, domain, points, tau_sep, cutoff_radius=0.3, d_min=0.5, escalations=3,
                      delta_sep=0.0):
    """Separation matrix from per-point past boundary-optimal beams.

    Beams are evaluated as quasimodes.  If ``|det|`` is below ``d_min`` the
    frequency is multiplied by four, at most ``escalations`` times.
    """
    pts = causal_order(points)
    for i, j in itertools.combinations(range(len(pts)), 2):
        if np.linalg.norm(pts[i] - pts[j]) <= delta_sep:
            raise ValueError("separation points must be pairwise farther apart than delta_sep")
    tau = float(tau_sep)
    for _ in range(escalations + 1):
        beams = tuple(
            _separating_beam(metric, domain, p, tau, cutoff_radius, avoid=pts[k + 1:])
            for k, p in enumerate(pts)
        )
        mat = SeparationMatrix(tuple(pts), beams, _entries(beams, pts), tau)
        if abs(mat.determinant) >= d_min:
            return mat
        tau *= 4
    raise SeparationError(f"|det| = {abs(mat.determinant):.3g} below {d_min} after escalation")


@dataclass(frozen=True)
class SeparationSolution:
    values: np.ndarray
    residual: float
    condition: float
    flagged: bool


def solve_separation(mat, measured, max_condition=1e8):
    """Solve ``A Q = measured`` for the point values ``Q``."""
    A = mat.entries if isinstance(mat, SeparationMatrix) else np.asarray(mat)
    b = np.asarray(measured)
    Q = np.linalg.solve(A, b)
    res = float(np.linalg.norm(A @ Q - b))
    cond = float(np.linalg.cond(A))
    scale = float(np.linalg.norm(b))
    if res > 1e-10 * max(scale, 1e-300):
        raise SeparationError("separation solve residual too large")
    flagged = cond > max_condition
    if flagged:
        logger.warning("separation matrix condition number %.3g above %.3g", cond, max_condition)
    return SeparationSolution(Q, res, cond, flagged)


@dataclass(eq=False)
class SeparationFilter:
    """Finite beam collection with cover sets on a grid of events."""

    points: list
    beams: list
    values: np.ndarray  # values[i, j] = beam i at point j
    covers: dict = field(default_factory=dict)
    sampled: int = 0
    failures: list = field(default_factory=list)

    @property
    def size(self):
        return len(self.beams)

    def matrix_for(self, indices, d_min):
        """Best separation matrix from the collection for grid points ``indices`` (causally ordered)."""
        cand = [[i for i in range(self.size) if abs(self.values[i, j]) >= 2 / 3] for j in indices]
        best, best_det = None, 0.0
        for choice in itertools.product(*cand):
            if len(set(choice)) < len(choice):
                continue
            A = self.values[np.ix_(choice, indices)]
            det = abs(np.linalg.det(A))
            if det > best_det:
                best, best_det = choice, det
        if best is None or best_det < d_min:
            return None
        return SeparationMatrix(
            tuple(self.points[j] for j in indices),
            tuple(self.beams[i] for i in best),
            self.values[np.ix_(best, indices)],
            float("nan"),
        )


def separation_filter(metric, domain, W_grid, P, delta_sep, tau_sep=100.0, cutoff_radius=0.3, samples=100,
                      seed=0, d_min=0.1):
    """Greedy beam cover of ``W_grid`` that separates ordered ``P``-tuples.

    Each uncovered grid point contributes its past boundary-optimal beam,
    which covers every grid point where it has modulus at least 2/3.  Then
    random ordered tuples of ``delta_sep``-separated points are drawn; if a
    tuple admits no invertible matrix, the later points get beams that miss
    the earlier ones and the tuple is retried.
    """
    pts = causal_order(W_grid)
    arr = np.array(pts)
    filt = SeparationFilter(pts, [], np.zeros((0, len(pts)), dtype=complex))

    def add(beam):
        filt.beams.append(beam)
        filt.values = np.vstack([filt.values, beam.evaluate(arr)[None, :]])
        k = len(filt.beams) - 1
        filt.covers[k] = [j for j in range(len(pts)) if abs(filt.values[k, j]) >= 2 / 3]

    for j, p in enumerate(pts):
        if filt.size and np.max(np.abs(filt.values[:, j])) >= 2 / 3:
            continue
        add(_separating_beam(metric, domain, p, tau_sep, cutoff_radius))
    logger.info("separation filter: %d beams cover %d points", filt.size, len(pts))
    if len(pts) < 2 or P < 2:
        return filt
    rng = np.random.default_rng(seed)
    dist = np.linalg.norm(arr[:, None, :] - arr[None, :, :], axis=-1)
    size = min(P, len(pts))
    for _ in range(samples):
        for _attempt in range(1000):
            idx = np.sort(rng.choice(len(pts), size=size, replace=False))
            sub = dist[np.ix_(idx, idx)]
            if np.all(sub[np.triu_indices(size, 1)] > delta_sep):
                break
        else:
            raise SeparationError("could not sample delta_sep-separated tuples")
        filt.sampled += 1
        idx = [int(i) for i in idx]
        if filt.matrix_for(idx, d_min) is not None:
            continue
        for j in idx:
            others = [pts[i] for i in idx if i != j]
            try:
                add(_separating_beam(metric, domain, pts[j], tau_sep, cutoff_radius, avoid=others, alternate=True))
            except SeparationError:
                continue
        if filt.matrix_for(idx, d_min) is None:
            filt.failures.append(tuple(idx))
    logger.info("separation filter: %d beams after sampling %d tuples", filt.size, filt.sampled)
    return filt


# --------------------------------------------------------------------------
# stability sweep


@dataclass(frozen=True, eq=False)
class Scenario:
    """Verification scenario for recovery runs and sweeps."""

    metric: object
    domain: object
    q: BumpPotential
    points: tuple
    m: int = 4
    s: int = 2
    M: float = 1.0
    kappa: float = 0.9
    tau0: float = 40.0
    settings: ProbeSettings = field(default_factory=ProbeSettings)

    @property
    def n(self):
        return self.domain.n


@dataclass(frozen=True)
class StabilityReport:
    deltas: tuple
    errors: tuple
    params: tuple
    rows: tuple
    slope: float
    intercept: float
    r_squared: float
    slope_band: tuple
    exponent: Fraction
    failures: tuple = ()

    @property
    def slope_defined(self):
        return np.isfinite(self.slope)


def _fit(deltas, errors):
    x = np.log(np.asarray(deltas))
    y = np.log(np.asarray(errors))
    ok = np.isfinite(y)
    if ok.sum() < 2:
        return float("nan"), float("nan"), float("nan"), (float("nan"), float("nan"))
    fit = stats.linregress(x[ok], y[ok])
    if ok.sum() > 2:
        half = float(stats.t.ppf(0.975, ok.sum() - 2)) * fit.stderr
    else:
        half = float("nan")
    return float(fit.slope), float(fit.intercept), float(fit.rvalue**2), (fit.slope - half, fit.slope + half)


def _sweep_job(args):
    scenario, grid, p, pid, eps, tau, delta, noise = args
    try:
        return recover_at(
            scenario.metric, scenario.domain, scenario.q, p, eps, tau, scenario.tau0, scenario.m, grid,
            scenario.settings, noise, delta, key=(pid,),
        )
    except WaveprobeError as exc:
        logger.warning("sweep point %s at delta %.3g failed: %s", tuple(p), delta, exc)
        return PointRecovery(tuple(as_point(p)), float("nan"), complex("nan"), tau, eps, complex("nan"), str(exc))


def stability_sweep(scenario, deltas, noise=None, s=None, m=None, jobs=1):
    """Recovery error on the scenario's points against the noise level.

    For each ``delta`` the optimizer picks ``(eps, tau)``; every point of
    ``scenario.points`` is recovered from DN traces perturbed with noise
    of norm ``delta``.  The grid is fixed by the largest ``tau`` in the
    ladder.  The report fits ``log err`` against ``log delta``.
    """
    deltas = tuple(float(d) for d in deltas)
    if any(b <= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("the delta ladder must be strictly increasing")
    s = scenario.s if s is None else s
    m = scenario.m if m is None else m
    n = scenario.n
    params = [optimal_params(m, s, n, d, scenario.M, scenario.kappa, scenario.tau0) for d in deltas]
    grid = scenario.settings.grid(scenario.metric, scenario.domain, max(p.tau for p in params))
    tasks = []
    for d, prm in zip(deltas, params):
        for pid, p in enumerate(scenario.points):
            tasks.append((scenario, grid, p, pid, prm.eps, prm.tau, d, noise))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_job, tasks))
    else:
        results = [_sweep_job(t) for t in tasks]
    rows = []
    errors = []
    failures = []
    npts = len(scenario.points)
    for k, d in enumerate(deltas):
        chunk = results[k * npts:(k + 1) * npts]
        errs = []
        for pid, r in enumerate(chunk):
            rows.append((d, pid, r))
            if r.error:
                failures.append((d, pid, r.error))
            else:
                errs.append(r.abs_err)
        errors.append(max(errs) if errs else float("nan"))
    slope, intercept, r2, band = _fit(deltas, errors)
    return StabilityReport(
        deltas=deltas,
        errors=tuple(errors),
        params=tuple(params),
        rows=tuple(rows),
        slope=slope,
        intercept=intercept,
        r_squared=r2,
        slope_band=band,
        exponent=sigma(s, m, n),
        failures=tuple(failures),
    )
