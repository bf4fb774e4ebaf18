"""Trajectory and map accuracy metrics."""

from __future__ import annotations

from typing import Dict, List, Sequence, Tuple

import numpy as np

from ._validation import check_trajectory
from .geometry import Pose


class LengthMismatch(ValueError):
    pass


def rigid_alignment(source: np.ndarray, target: np.ndarray) -> Pose:
    """Least-squares rotation and translation (no scale) mapping ``source``
    points onto ``target`` points, via the SVD of the cross-covariance."""
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    C = (target - mu_t).T @ (source - mu_s)
    U, _, Vt = np.linalg.svd(C)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ S @ Vt
    return Pose(R, mu_t - R @ mu_s)


def _positions(traj):
    return check_trajectory(traj)


def align_trajectories(estimated, ground_truth) -> Pose:
    est, gt = _positions(estimated), _positions(ground_truth)
    if len(est) != len(gt):
        raise LengthMismatch(f"trajectories have {len(est)} and {len(gt)} poses")
    return rigid_alignment(est, gt)


def ate_rmse(estimated, ground_truth) -> float:
    """RMSE of translation residuals after rigid alignment of the estimate
    onto the ground truth."""
    est, gt = _positions(estimated), _positions(ground_truth)
    if len(est) != len(gt):
        raise LengthMismatch(f"trajectories have {len(est)} and {len(gt)} poses")
    T = rigid_alignment(est, gt)
    res = est @ T.rotation.T + T.translation - gt
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1))))


def association_precision_recall(predicted: Sequence[int], truth: Sequence[int]) -> Tuple[float, float]:
    """Pairwise clustering precision and recall: a pair of measurements is a
    positive when both go to the same landmark. Measurements with a negative
    true id (no ground-truth object) are ignored."""
    items = [(p, t) for p, t in zip(predicted, truth) if t is not None and t >= 0 and p is not None]
    # counting pairs through contingency tables avoids the quadratic loop
    joint: Dict[Tuple[int, int], int] = {}
    pred_n: Dict[int, int] = {}
    true_n: Dict[int, int] = {}
    for p, t in items:
        joint[(p, t)] = joint.get((p, t), 0) + 1
        pred_n[p] = pred_n.get(p, 0) + 1
        true_n[t] = true_n.get(t, 0) + 1

    def pairs(n):
        return n * (n - 1) // 2

    tp = sum(pairs(n) for n in joint.values())
    fp = sum(pairs(n) for n in pred_n.values()) - tp
    fn = sum(pairs(n) for n in true_n.values()) - tp
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return float(precision), float(recall)


def landmark_errors(landmarks, measurement_truth: Dict[int, List[int]], objects, alignment: Pose = None) -> List[dict]:
    """Centroid error of every landmark against the ground-truth object most
    of its measurements came from.

    ``measurement_truth`` maps landmark id to the true ids of its
    measurements; ``objects`` is the list of true models indexed by id.
    """
    T = alignment or Pose.identity()
    out = []
    for lm in landmarks:
        ids = [t for t in measurement_truth.get(lm.id, []) if t is not None and t >= 0]
        if not ids:
            out.append({"id": lm.id, "label": lm.label, "object": None, "error": None})
            continue
        vals, counts = np.unique(ids, return_counts=True)
        obj = int(vals[np.argmax(counts)])
        c = T.apply(lm.center)
        err = float(np.linalg.norm(c - objects[obj].center))
        out.append({"id": lm.id, "label": lm.label, "object": obj, "error": err})
    return out
