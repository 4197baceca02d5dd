"""Exception types shared across the toolkit."""


class InsensError(Exception):
    """Base class for all toolkit errors."""


class InvalidSpec(InsensError):
    """Domain specification is inconsistent or rasterizes to an empty region."""


class DimensionMismatch(InsensError):
    """Operands live on incompatible grids or time discretizations."""


class SolverFailure(InsensError):
    """A linear solve exceeded its iteration or tolerance budget."""


class PerturbationTooLarge(InsensError):
    """A dilated rectangle no longer contains omega or theta."""


class GeometryUnsupported(InsensError):
    """The requested operation needs a geometric setting the spec does not provide."""


class VerificationFailed(InsensError):
    """An independent re-solve violated a stated criterion.

    Carries the offending result object in ``result`` when available.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class BadTimeDivision(InsensError):
    """Nt is not divisible by 2M, so gamma windows cannot align with time levels."""


class AllDirectionsTangent(InsensError):
    """Every perturbation direction has vanishing normal trace."""


class NoSolutionFound(InsensError):
    """The lambda solve exhausted bisection, fixed-point and Newton attempts."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class BandTooThin(InsensError):
    """A cutoff transition band has fewer than the minimum number of grid cells."""


class ParseError(InsensError):
    """Config file is syntactically invalid or contains unknown keys."""


class ValidationError(InsensError):
    """Config file is well formed but semantically incomplete or inconsistent."""


class NoConvergenceGuarantee(UserWarning):
    """Assembled quadratic part deviates too much from the decoupled ideal."""
