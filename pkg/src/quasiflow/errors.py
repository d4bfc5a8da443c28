"""Exception hierarchy shared by the pipeline stages."""


class QuasiflowError(Exception):
    """Base class for all package errors."""


class ConfigError(QuasiflowError):
    """Invalid or inconsistent experiment configuration."""


class MissingArtifactError(QuasiflowError):
    """A stage input file is absent; carries the missing path."""


class DivergentIntegralError(QuasiflowError):
    """A declared singularity makes the requested norm infinite."""


class InstabilityError(QuasiflowError):
    """Advection CFL check failed for the requested grid/time step."""


class OutOfDomainError(QuasiflowError):
    """Evaluation requested outside the solution grid box."""


class NonConvergenceError(QuasiflowError):
    """Fixed-point inversion failed to contract (gradient certificate violated)."""


class SingularMatrixError(QuasiflowError):
    """Jacobian of the coordinate change is numerically singular."""


class DriverMismatchError(QuasiflowError):
    """Density evaluation received increments from a different driver."""


class NonFiniteIntegrandError(QuasiflowError):
    """A density integrand blew up; message records the (path, step) location."""


class ExtrapolationError(QuasiflowError):
    """Inverse-flow query outside the image interval of the sampled flow."""


class LambdaSearchError(QuasiflowError):
    """Doubling search exhausted its cap without certifying gradient smallness."""


class VerificationFailure(QuasiflowError):
    """Raised by the CLI when a verify suite reports failed checks."""
