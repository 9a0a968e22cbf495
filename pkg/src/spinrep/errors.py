"""Exception hierarchy for the spinrep toolkit."""


class SpinrepError(Exception):
    """Base class for all toolkit errors."""


class GridMismatch(SpinrepError):
    """Two fields live on different grids."""


class NegativeDensity(SpinrepError):
    """A density field has entries below the negativity floor."""


class TargetOutOfRange(SpinrepError):
    """Requested cumulative-mass target lies outside [0, total]."""


class NotPSD(SpinrepError):
    """A 2x2 matrix field is not pointwise positive semi-definite."""


class NotCurlFree(SpinrepError):
    """Vector field fails the discrete curl-free test."""


class SolverFailed(SpinrepError):
    """Phase solver could not certify the residual target.

    Carries the best residuals reached so the caller can diagnose.
    """

    def __init__(self, message, residuals=None, scales=None):
        super().__init__(message)
        self.residuals = residuals
        self.scales = scales


class ResidualNotMet(SpinrepError):
    """Weighted phase-system solve ended above the residual target."""

    def __init__(self, message, phases=None, residual=None):
        super().__init__(message)
        self.phases = phases
        self.residual = residual


class PartitionInvalid(SpinrepError):
    """Weight list is not a partition of unity on the support."""


class PreconditionFailed(SpinrepError):
    """A builder precondition (membership check) did not pass."""


class ReconstructionFailed(SpinrepError):
    """Constructed orbitals do not reproduce the target within tolerance."""

    def __init__(self, message, error=None):
        super().__init__(message)
        self.error = error


class InfeasibleSplit(SpinrepError):
    """No cutoff case matched; carries the profiles for diagnosis."""

    def __init__(self, message, profiles=None):
        super().__init__(message)
        self.profiles = profiles


class MassNotInteger(SpinrepError):
    """Cutoff tuning missed the integer block mass."""


class TuningFailed(SpinrepError):
    """Bisection bracket exhausted while tuning a weight shift."""


class InvariantViolation(SpinrepError):
    """A structural invariant failed; message carries worst-node data."""


class OutOfGuaranteedRange(SpinrepError):
    """Construction requested outside the guaranteed N range."""


class UnknownCatalogEntry(SpinrepError):
    """Requested catalog entry does not exist."""
