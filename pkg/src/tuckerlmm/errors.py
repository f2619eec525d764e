"""Exception types shared across the package.

The CLI maps these onto process exit codes, so new error conditions should
reuse one of the classes below rather than raising bare ValueErrors.
"""


class TuckerlmmError(Exception):
    """Base class for all package errors."""


class ShapeError(TuckerlmmError, ValueError):
    """Tensor/matrix dimensions are inconsistent for the requested operation."""


class FactorizationError(TuckerlmmError, ValueError):
    """A factorization precondition failed (e.g. a rank-deficient mode)."""


class ConstraintError(TuckerlmmError, ValueError):
    """A linear constraint system is rank-deficient or infeasible."""


class DomainError(TuckerlmmError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class CapabilityError(TuckerlmmError, RuntimeError):
    """The request exceeds a deliberate size guard on a diagnostic tool."""


class ConfigError(TuckerlmmError, ValueError):
    """Invalid configuration value or file.  CLI exit code 2."""


class DataError(TuckerlmmError, ValueError):
    """Invalid dataset, manifest, or tensor file.  CLI exit code 3."""


class NumericalError(TuckerlmmError, RuntimeError):
    """Unrecoverable numerical failure (NaN/Inf state, SPD failure).  CLI exit code 4."""


class OracleFailure(TuckerlmmError, RuntimeError):
    """An oracle or calibration suite reported a failure.  CLI exit code 5."""
