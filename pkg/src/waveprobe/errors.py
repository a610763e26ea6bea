"""Exception hierarchy shared by all modules."""


class WaveprobeError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(WaveprobeError):
    """Invalid or unresolvable scenario configuration."""


class NumericalError(WaveprobeError):
    """A computation could not be carried out to the requested accuracy."""


class MetricError(NumericalError):
    """Metric is degenerate or has the wrong signature at some event."""


class GeodesicError(NumericalError):
    """Geodesic integration failed (step underflow, immediate exit, drift)."""


class FrameError(NumericalError):
    """Frame construction or transport violated the frame identities."""


class FermiChartError(NumericalError):
    """Tube coordinates could not be built or inverted."""


class NoBoundaryHitError(NumericalError):
    """No traced null direction reached the lateral boundary."""


class IntersectionBoundError(NumericalError):
    """Two causal paths meet more often than the configured cap allows.

    The cap mirrors the finite bound on intersection points of two
    null geodesics; exceeding it means the configuration is outside the
    regime the recovery procedure supports.
    """


class DegenerateIntersectionError(NumericalError):
    """Two paths coincide on an interval (continuum of intersections)."""


class CFLError(NumericalError):
    """Time step violates the stability restriction of the leapfrog scheme."""


class CompatibilityError(NumericalError):
    """Boundary data is not compatible with the Cauchy data at t = 0."""


class SmallnessError(NumericalError):
    """Boundary data exceeds the configured smallness threshold."""


class DivergenceError(NumericalError):
    """Fixed-point iteration diverged; the data is too large."""


class ConvergenceError(NumericalError):
    """Iteration did not reach the tolerance within the allowed steps."""


class CausticError(NumericalError):
    """Amplitude matrix became singular along the traced range."""


class ResolutionError(NumericalError):
    """Grid does not resolve the beam oscillation."""


class PositivityError(NumericalError):
    """Imaginary part of the phase Hessian lost positivity."""


class CauchySurfaceError(NumericalError):
    """Beam support touches the Cauchy surface it must avoid."""


class ProbeError(NumericalError):
    """Probe bundle cannot be assembled at the requested event."""


class SeparationError(NumericalError):
    """Separation matrix is too close to singular."""
