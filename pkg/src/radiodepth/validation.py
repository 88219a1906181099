"""Small input-checking helpers shared across the package."""

import numpy as np


def as_float_array(x, name, shape=None):
    """Coerce to a float64 ndarray, optionally enforcing a shape."""
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


def check_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must contain only finite values")


def check_unit_vector(v, name, tol=1e-9):
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > tol:
        raise ValueError(f"{name} must be unit-norm (|v| = {n!r})")


def check_positive(value, name):
    if not value > 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")


def check_rotation_matrix(r, name, tol=1e-9):
    r = as_float_array(r, name, shape=(3, 3))
    err = np.abs(r @ r.T - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"{name} is not orthonormal (max |R R^T - I| = {err:.3e})")
    det = float(np.linalg.det(r))
    if abs(det - 1.0) > tol:
        raise ValueError(f"{name} must be a proper rotation (det = {det!r})")
    return r


def as_points(points, name="points"):
    """Coerce to an (N, 3) float64 array of finite coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 0:
        pts = pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must be an (N, 3) array, got shape {pts.shape}")
    check_finite(pts, name)
    return pts
