"""
Exception hierarchy for vortexlab.

Library code raises these; the command-line runner converts them into
exit codes through the ``exit_code`` attribute.
"""


class VortexLabError(Exception):
    """Base class for all vortexlab failures."""
    exit_code = 1


class ConfigValidationError(VortexLabError):
    """Experiment configuration is malformed or out of range."""
    exit_code = 2


class SolverFailure(VortexLabError):
    """A static solve could not produce an acceptable solution."""
    exit_code = 3


class NonConvergence(SolverFailure):
    """Newton iteration hit its iteration budget."""

    def __init__(self, max_iters, residual):
        self.max_iters = max_iters
        self.residual = residual
        super().__init__(f"Newton did not converge in {max_iters} iterations "
                         f"(final residual {residual:.3e})")


class BradlowViolation(SolverFailure):
    """The torus divisor violates tau * vol > 4 pi d."""

    def __init__(self, degree, tau, vol, margin):
        self.margin = margin
        super().__init__(f"no {degree}-vortex solution for tau={tau}, vol={vol}: "
                         f"margin {margin:.6g} is not positive")


class ZeroTooCloseToBoundary(SolverFailure):
    """A prescribed zero sits too close to the disk boundary."""


class DynamicsBlowUp(VortexLabError):
    """Hyperbolic evolution lost energy conservation."""
    exit_code = 4


class CFLViolation(DynamicsBlowUp):
    """Time step exceeds the CFL limit."""


class IllDefinedVortexNumber(VortexLabError):
    """|Phi| is too small on the measuring contour."""


class NearCoincidence(VortexLabError):
    """Zeros too close for a metric evaluation in zero coordinates."""
    exit_code = 3


class ScatteringError(VortexLabError):
    """Trajectory never enters the coincidence ball."""


class NearCoincidenceWarning(UserWarning):
    """Metric evaluated inside the near-coincidence zone."""
