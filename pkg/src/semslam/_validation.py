"""Input validation helpers shared by the estimators."""

import numpy as np
from sklearn.utils import check_array

from .geometry import Pose


def check_points(X, min_points=1):
    """Validate an ``(n, 3)`` float array of 3D points."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_min_samples=1)
    if X.shape[1] != 3:
        raise ValueError(f"expected points of shape (n, 3), got {X.shape}")
    if len(X) < min_points:
        from .proposals import DegenerateInput

        raise DegenerateInput(f"need at least {min_points} points, got {len(X)}")
    return X


def check_trajectory(poses):
    """Accept a list of :class:`Pose` or an ``(n, 4, 4)`` / ``(n, 3)`` array;
    return translations as ``(n, 3)``."""
    if len(poses) and isinstance(poses[0], Pose):
        return np.array([p.translation for p in poses], dtype=float).reshape(-1, 3)
    a = np.asarray(poses, dtype=float)
    if a.ndim == 3 and a.shape[1:] == (4, 4):
        return a[:, :3, 3]
    return check_array(a, dtype=np.float64, ensure_min_samples=1).reshape(-1, 3)
