"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ContractError


def check_prediction_matrix(X):
    """Coerce to a finite 2-D float array of prediction vectors (one per row)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    return check_array(X, dtype=float, ensure_min_samples=1, ensure_min_features=1)


def check_targets(y, n):
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != n:
        raise ContractError(f"expected {n} targets, got {y.shape[0]}")
    if not np.all(np.isfinite(y)):
        raise ContractError("targets must be finite")
    return y


def check_probability(value, name):
    if not 0.0 <= value <= 1.0:
        raise ContractError(f"{name} must lie in [0, 1], got {value}")
    return value
