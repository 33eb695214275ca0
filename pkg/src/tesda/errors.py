"""Exception hierarchy. The CLI maps these onto exit codes."""


class TesdaError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(TesdaError, ValueError):
    """Bad inputs: out-of-range parameters, malformed manifests, shape
    mismatches. CLI exit code 2."""


class FormatError(ValidationError):
    """Malformed or truncated binary file (bad magic, checksum, payload)."""


class VersionError(FormatError):
    """File written by an incompatible format version."""


class NumericalError(TesdaError, ArithmeticError):
    """Numerical failure: singular covariance, ill-conditioning,
    non-convergent iteration. CLI exit code 3."""
