"""Exception types shared across the package."""


class SpinlockError(Exception):
    """Base class for all package errors."""


class InputError(SpinlockError, ValueError):
    """Invalid or inconsistent input data (mismatched grids, bad fields)."""


class SingularEvaluationError(SpinlockError, ValueError):
    """A spectral model was evaluated at a frequency where it diverges."""


class SynthesisError(SpinlockError, ValueError):
    """The requested noise trajectory cannot be synthesized."""


class QuadratureError(SpinlockError, RuntimeError):
    """A frequency integral did not converge; carries diagnostics."""


class FitError(SpinlockError, RuntimeError):
    """A least-squares fit failed to converge."""


class SearchRangeError(SpinlockError, RuntimeError):
    """A scalar optimization hit the boundary of its scan range."""


class ConfigError(SpinlockError, ValueError):
    """A run configuration file is malformed or inconsistent."""
