"""Error types and input validation helpers shared across the package."""
import numpy as np


class ConfigurationError(ValueError):
    """Invalid model, config or dimension."""


class SingularityError(ArithmeticError):
    def __init__(self, message, condition_number):
        super().__init__(message)
        self.condition_number = condition_number


class NumericFault(FloatingPointError):
    """A forward computation produced NaN or Inf."""


class TerminalStateError(RuntimeError):
    """Stepping an episode that has already terminated."""


class DatasetHashMismatch(RuntimeError):
    pass


class FormatVersionError(ValueError):
    pass


def check_vector(x, n, name="x"):
    arr = np.asarray(x, dtype=float)
    if arr.shape != (n,):
        raise ConfigurationError(f"{name} must have shape ({n},), got {arr.shape}")
    return arr


def check_array(x, ndim=None, name="X", finite=True):
    arr = np.asarray(x, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ConfigurationError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if finite and not np.isfinite(arr).all():
        raise ConfigurationError(f"{name} contains non-finite values")
    return arr


def check_is_fitted(estimator, attributes):
    from sklearn.exceptions import NotFittedError

    if isinstance(attributes, str):
        attributes = [attributes]
    if not all(getattr(estimator, a, None) is not None for a in attributes):
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit first")
