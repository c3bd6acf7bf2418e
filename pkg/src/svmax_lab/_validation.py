import numpy as np

from .errors import InvalidInput, NormViolation


def as_matrix(a, name="matrix"):
    """Return `a` as a finite 2D float64 array, raising InvalidInput otherwise."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInput(f"{name} must be a non-empty 2D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains NaN or Inf")
    return arr


def check_unit_rows(e, tol=1e-9, name="embeddings"):
    norms = np.linalg.norm(e, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise NormViolation(f"{name} rows must be L2-normalized (max deviation {worst:.3g})")


def has_unit_rows(e, tol=1e-9):
    return bool(np.all(np.abs(np.linalg.norm(e, axis=1) - 1.0) <= tol))
