class FluxcalError(Exception):
    """Base class for library errors."""


class UnderdeterminedError(FluxcalError, ValueError):
    """Fewer observations than free parameters."""


class OptimizationError(FluxcalError, RuntimeError):
    """No start produced a finite objective."""


class SingularFitError(FluxcalError, ValueError):
    """Least-squares design matrix is rank deficient."""


class EnsembleQualityError(FluxcalError, RuntimeError):
    """Too many bootstrap replicates failed."""


class CalibrationDomainError(FluxcalError, ValueError):
    """Linearized reference flux is not positive."""
