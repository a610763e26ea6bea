"""Probing semilinear wave equations with Gaussian beams.

Submodules
----------
geometry
    Metrics, null geodesics, lightcone frames, Fermi charts, boundary hits.
wave_solver
    Leapfrog solver for linear and semilinear problems and the DN map.
gaussian_beam
    Beam construction (Riccati, transport), residuals and corrections.
linearization
    Mixed finite differences and the integral identity.
reconstruction
    Pointwise recovery, separation of points, exponent bookkeeping, sweeps.
cli
    Batch front end.
"""
import logging

from . import errors
from .errors import WaveprobeError
from .geometry import Domain, minkowski, perturbed_beta, time_dependent_h
from .linearization import DnOperator, DnProbe, identity_evaluate, mixed_finite_difference
from .reconstruction import (
    BumpPotential,
    GaussianBump,
    NoiseModel,
    ProbeSettings,
    Scenario,
    build_probe,
    optimal_params,
    recover_at,
    sigma,
    stability_sweep,
)
from .wave_solver import SpacetimeGrid, dn_map, solve_linear, solve_semilinear

logging.getLogger(__name__).addHandler(logging.NullHandler())

__version__ = "0.1.0"

__all__ = [
    "BumpPotential",
    "DnOperator",
    "DnProbe",
    "Domain",
    "GaussianBump",
    "NoiseModel",
    "ProbeSettings",
    "Scenario",
    "SpacetimeGrid",
    "WaveprobeError",
    "build_probe",
    "dn_map",
    "errors",
    "identity_evaluate",
    "minkowski",
    "mixed_finite_difference",
    "optimal_params",
    "perturbed_beta",
    "recover_at",
    "sigma",
    "solve_linear",
    "solve_semilinear",
    "stability_sweep",
    "time_dependent_h",
]
