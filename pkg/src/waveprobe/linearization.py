"""Higher-order linearization of the nonlinear DN map.

Mixed finite differences over the ``2^m`` sign patterns isolate the
``m``-linear part of the DN map, which pairs against an auxiliary solution
``v0`` to give the integral identity

    -m! int q v0 v_1 ... v_m dV_g  =  int_Sigma v0 d_nu(m! w) dS
                                   ~  int_Sigma v0 D^m Lambda dS.
"""
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ProbeError
from .wave_solver import (
    LateralBoundaryData,
    ScalarField,
    TraceField,
    _values,
    integrate,
    integrate_sigma,
    normal_derivative,
    solve_linear,
    solve_semilinear,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DnProbe:
    """Boundary inputs ``f_1..f_m`` with weights ``eps_1..eps_m``.

    ``linear_solutions`` optionally caches the solutions ``v_j`` of the
    linear problem with data ``f_j``; sign-pattern solves then reuse them.
    """

    inputs: tuple
    eps: tuple
    m: int
    linear_solutions: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        eps = (float(self.eps),) * len(self.inputs) if np.isscalar(self.eps) else tuple(float(e) for e in self.eps)
        object.__setattr__(self, "eps", eps)
        if len(self.inputs) != self.m or len(self.eps) != self.m:
            raise ValueError("a probe needs exactly m inputs and m weights")
        if any(e <= 0 for e in self.eps):
            raise ValueError("probe weights must be positive")

    @property
    def grid(self):
        return self.inputs[0].grid

    def combined(self, sigma):
        """Boundary data ``sum_j sigma_j eps_j f_j``."""
        vals = sum(s * e * f.values for s, e, f in zip(sigma, self.eps, self.inputs))
        return LateralBoundaryData(self.grid, np.asarray(vals, dtype=complex))

    def combined_linear(self, sigma):
        if self.linear_solutions is None:
            return None
        vals = sum(s * e * v.values for s, e, v in zip(sigma, self.eps, self.linear_solutions))
        return ScalarField(self.grid, np.asarray(vals, dtype=complex))

    def with_linear_solutions(self, metric):
        sols = tuple(first_order_terms(metric, self, self.grid))
        return DnProbe(self.inputs, self.eps, self.m, sols)

    def permuted(self, order):
        sols = None if self.linear_solutions is None else tuple(self.linear_solutions[i] for i in order)
        return DnProbe(tuple(self.inputs[i] for i in order), tuple(self.eps[i] for i in order), self.m, sols)


def sign_patterns(m):
    """All ``sigma`` in ``{0,1}^m`` (fixed order) with signs ``(-1)^(|sigma| + m)``."""
    out = []
    for sigma in itertools.product((0, 1), repeat=m):
        out.append((sigma, (-1) ** (sum(sigma) + m)))
    return out


class DnOperator:
    """Picklable DN map ``(data, linear_part) -> TraceField`` for fixed ``(metric, q, m, grid)``."""

    def __init__(self, metric, q, m, grid, **solver_options):
        self.metric = metric
        self.q = q
        self.m = m
        self.grid = grid
        self.solver_options = solver_options

    def __call__(self, data, linear_part=None):
        u, _ = solve_semilinear(
            self.metric, self.q, self.m, data, self.grid, linear_part=linear_part, **self.solver_options
        )
        vals = normal_derivative(self.metric, u.values, self.grid)
        nl = normal_derivative(self.metric, u.nonlinear, self.grid)
        return TraceField(self.grid, vals, nl)


def _run_pattern(args):
    dn, probe, sigma = args
    if not any(sigma):
        z = np.zeros((probe.grid.nt + 1, probe.grid.sigma.size), dtype=complex)
        return TraceField(probe.grid, z, z.copy())
    try:
        return dn(probe.combined(sigma), probe.combined_linear(sigma))
    except NumericalError as exc:
        raise type(exc)(f"sign pattern {sigma}: {exc}") from exc


def mixed_finite_difference(dn, probe, split=True, jobs=1):
    """``(eps_1...eps_m)^-1 sum_sigma (-1)^(|sigma|+m) Lambda(sum_j sigma_j eps_j f_j)``.

    With ``split=True`` only the nonlinear parts of the traces are summed;
    the linear parts cancel exactly because every ``f_j`` enters with
    coefficients summing to zero.  This avoids cancelling ``O(eps)``
    numbers down to ``O(eps^m)``.  ``split=False`` sums the full traces.

    The reduction runs in the fixed pattern order whatever ``jobs`` is.
    """
    patterns = sign_patterns(probe.m)
    tasks = [(dn, probe, sigma) for sigma, _ in patterns]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            traces = list(pool.map(_run_pattern, tasks))
    else:
        traces = [_run_pattern(t) for t in tasks]
    total = None
    for (sigma, sign), tr in zip(patterns, traces):
        part = tr.nonlinear if split else tr.values
        if part is None:
            raise ValueError("split differences need traces that carry their nonlinear part")
        total = sign * part if total is None else total + sign * part
    scale = float(np.prod(probe.eps))
    return TraceField(probe.grid, total / scale)


def first_order_terms(metric, probe, grid):
    """Solutions ``v_j`` of ``box_g v = 0`` with ``v = f_j`` on the boundary and zero Cauchy data."""
    if probe.linear_solutions is not None:
        return list(probe.linear_solutions)
    return [solve_linear(metric, None, f, None, None, grid) for f in probe.inputs]


def cross_term(metric, q, vs, grid):
    """``w`` solving ``box_g w = -q v_1...v_m`` with zero data."""
    prod = np.ones(grid.shape, dtype=complex)
    for v in vs:
        prod = prod * _values(v)
    qv = _values(q)
    F = -qv * prod
    if not np.any(F):
        return ScalarField(grid, np.zeros(grid.shape, dtype=complex))
    return solve_linear(metric, F, None, None, None, grid)


@dataclass(frozen=True)
class IdentityEvaluation:
    """Both sides of the integral identity.

    ``lhs`` is ``-m! int q v0 v_1...v_m dV_g`` (NaN in measurement mode),
    ``rhs_boundary`` is ``int_Sigma v0 D^m Lambda dS``,
    ``rhs_remainder = lhs - rhs_boundary`` is the closure residual and
    ``expansion_remainder = int_Sigma v0 (D^m Lambda - m! d_nu w) dS`` the
    part caused by finite weights alone.
    """

    lhs: complex
    rhs_boundary: complex
    rhs_remainder: complex
    discrepancy: float
    expansion_remainder: complex = complex("nan")

    def as_row(self):
        return {
            "lhs_re": self.lhs.real,
            "lhs_im": self.lhs.imag,
            "rhs_boundary_re": self.rhs_boundary.real,
            "rhs_boundary_im": self.rhs_boundary.imag,
            "rhs_remainder_re": self.rhs_remainder.real,
            "rhs_remainder_im": self.rhs_remainder.imag,
            "discrepancy": self.discrepancy,
        }


def check_final_data(v0, rtol=1e-10):
    """Raise :class:`ProbeError` unless ``v0`` vanishes on the last two time levels."""
    vals = _values(v0)
    scale = float(np.max(np.abs(vals)))
    if scale == 0:
        return
    if np.max(np.abs(vals[-2:])) > rtol * scale:
        raise ProbeError("auxiliary solution does not have vanishing Cauchy data at the final time")


def identity_evaluate(
    metric,
    q_known,
    v0,
    probe,
    grid,
    mixed=None,
    dn=None,
    with_expansion=False,
    jobs=1,
):
    """Evaluate the integral identity for one probe.

    Parameters
    ----------
    q_known : array or None
        Potential on the grid.  ``None`` selects measurement mode: ``lhs``
        is not computed and ``mixed`` (or ``dn``) must be supplied.
    v0 : ScalarField
        Solution of the linear equation with zero Cauchy data at ``T``.
    mixed : TraceField, optional
        Precomputed mixed difference.  Otherwise it is computed with ``dn``,
        or with the exact DN map of ``q_known``.
    with_expansion : bool
        Also solve for ``w`` and report the finite-weight remainder.
    """
    check_final_data(v0)
    m = probe.m
    v0v = _values(v0)
    vs = first_order_terms(metric, probe, grid)
    if mixed is None:
        if dn is None:
            if q_known is None:
                raise ValueError("measurement mode needs a mixed difference or a DN map")
            dn = DnOperator(metric, q_known, m, grid, kappa=None)
        if probe.linear_solutions is None:
            probe = DnProbe(probe.inputs, probe.eps, m, tuple(vs))
        mixed = mixed_finite_difference(dn, probe, jobs=jobs)
    rhs = complex(integrate_sigma(metric, grid, grid.sigma.take(v0v) * mixed.values))
    fact = math.factorial(m)
    if q_known is None:
        return IdentityEvaluation(complex("nan"), rhs, complex("nan"), float("nan"))
    prod = v0v * _values(q_known)
    for v in vs:
        prod = prod * _values(v)
    lhs = complex(-fact * integrate(metric, grid, prod))
    rem = lhs - rhs
    disc = abs(rem) / abs(lhs) if lhs != 0 else abs(rem)
    expansion = complex("nan")
    if with_expansion:
        w = cross_term(metric, q_known, vs, grid)
        dw = normal_derivative(metric, w.values, grid)
        expansion = complex(integrate_sigma(metric, grid, grid.sigma.take(v0v) * (mixed.values - fact * dw)))
    return IdentityEvaluation(lhs, rhs, rem, float(disc), expansion)
