"""Measurement-to-landmark association and the landmark registry."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .factors import residual_point_landmark
from .geometry import CuboidModel, CylinderModel, LandmarkModel, Pose
from .proposals import Proposal3D

DEFAULT_SIGMA = 0.5
DEFAULT_TAU = 0.2
FEATURE_CAP = 50
SEMANTIC_FLOOR = 0.05
OUTLIER_LABELS = frozenset({"person"})


@dataclass
class Landmark:
    id: int
    model: LandmarkModel  # world frame
    label: str
    created: int
    observations: int = 1
    weight: float = 1.0

    @property
    def center(self):
        return self.model.center


def _model_to_dict(m: LandmarkModel):
    d = {"shape": m.shape, "center": [float(x) for x in m.center], "yaw": float(m.yaw)}
    if isinstance(m, CylinderModel):
        d["dims"] = {"height": float(m.height), "radius": float(m.radius)}
    else:
        w, l, h = (float(x) for x in m.dims)
        d["dims"] = {"width": w, "length": l, "height": h}
    return d


def _model_from_dict(d, label):
    dims = d["dims"]
    if d["shape"] == "cylinder":
        return CylinderModel(d["center"], dims["height"], dims["radius"], label)
    return CuboidModel(d["center"], (dims["width"], dims["length"], dims["height"]), d["yaw"], label)


def _footprint(m: LandmarkModel):
    c = m.center
    if isinstance(m, CylinderModel):
        ang = np.linspace(0.0, 2.0 * np.pi, 16, endpoint=False)
        pts = np.column_stack([c[0] + m.radius * np.cos(ang), c[1] + m.radius * np.sin(ang)])
    else:
        pts = (c + m.offsets())[:4, :2]
        pts = pts[[0, 1, 3, 2]]
    return [[float(x), float(y)] for x, y in pts]


@dataclass
class LandmarkRegistry:
    """Single-writer store of landmarks, exported as the object map."""

    landmarks: List[Landmark] = field(default_factory=list)
    next_id: int = 0

    def __len__(self):
        return len(self.landmarks)

    def __iter__(self):
        return iter(self.landmarks)

    def get(self, lid) -> Landmark:
        for lm in self.landmarks:
            if lm.id == lid:
                return lm
        raise KeyError(lid)

    def create(self, model: LandmarkModel, frame_index: int, weight=1.0) -> Landmark:
        lm = Landmark(self.next_id, model, model.label, frame_index, 1, weight)
        self.next_id += 1
        self.landmarks.append(lm)
        return lm

    def observe(self, lid, model: LandmarkModel):
        """Count an observation and fold it into a running-mean estimate."""
        lm = self.get(lid)
        n = lm.observations
        center = (lm.center * n + model.center) / (n + 1)
        yaw = lm.model.yaw
        if isinstance(model, CuboidModel):
            # average orientation modulo pi (box symmetry)
            d = math.remainder(model.yaw - yaw, math.pi)
            yaw = yaw + d / (n + 1)
        lm.model = lm.model.moved(center, yaw)
        lm.observations = n + 1

    def to_dict(self):
        return {
            "schema_version": 1,
            "landmarks": [
                {
                    "id": lm.id,
                    "label": lm.label,
                    "created": lm.created,
                    "observations": lm.observations,
                    "weight": lm.weight,
                    **_model_to_dict(lm.model),
                    "topview": {"x": float(lm.center[0]), "y": float(lm.center[1]), "footprint": _footprint(lm.model)},
                }
                for lm in self.landmarks
            ],
        }

    @classmethod
    def from_dict(cls, d):
        lms = [
            Landmark(int(x["id"]), _model_from_dict(x, x["label"]), x["label"], int(x["created"]), int(x["observations"]), float(x["weight"]))
            for x in d["landmarks"]
        ]
        return cls(lms, max((lm.id for lm in lms), default=-1) + 1)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def export_landmark_map(landmarks, path):
    reg = landmarks if isinstance(landmarks, LandmarkRegistry) else LandmarkRegistry(list(landmarks))
    reg.save(path)
    return path


# -- association -------------------------------------------------------------


def feature_prior(n_features: int, cap: int = FEATURE_CAP) -> float:
    return min(1.0, n_features / cap)


def semantic_prior(beta_prev: float, floor: float = SEMANTIC_FLOOR) -> float:
    return max(beta_prev, floor)


@dataclass
class AssociationWeights:
    ids: List[int]  # landmarks that pass the label gate
    weights: np.ndarray  # normalised over ``ids``
    unnormalized: np.ndarray
    max_unnormalized: float

    def argmax(self) -> Optional[int]:
        if not self.ids:
            return None
        return self.ids[int(np.argmax(self.weights))]


def _world_model(measurement, pose):
    if isinstance(measurement, Proposal3D):
        if pose is None:
            raise ValueError("a camera-frame proposal needs the camera pose")
        return measurement.in_frame(pose)
    return measurement if pose is None else measurement.moved(pose.apply(measurement.center))


def association_weights(measurement, landmarks, pose: Optional[Pose] = None, p0=1.0, pc=1.0, sigma=DEFAULT_SIGMA) -> AssociationWeights:
    """Label-gated Gaussian distance weights of one measurement over landmarks.

    ``measurement`` is a :class:`Proposal3D` (camera frame, with ``pose`` =
    world_from_cam) or a world-frame model (``pose=None``).
    """
    m = _world_model(measurement, pose)
    ids, raw = [], []
    for lm in landmarks:
        if lm.label != m.label:
            continue
        d2 = float(np.sum((m.center - lm.center) ** 2))
        ids.append(lm.id)
        raw.append(p0 * pc * math.exp(-d2 / (2.0 * sigma * sigma)))
    raw = np.array(raw)
    total = raw.sum() if len(raw) else 0.0
    if total > 0:
        w = raw / total
    elif len(raw):
        # every kernel underflowed: fall back to uniform over the gated set
        w = np.full(len(raw), 1.0 / len(raw))
    else:
        w = raw
    return AssociationWeights(ids, w, raw, float(raw.max()) if len(raw) else 0.0)


@dataclass
class AssociationResult:
    landmark_id: int
    created: bool
    weights: AssociationWeights


def assign_or_create(measurement, registry: LandmarkRegistry, pose=None, p0=1.0, pc=1.0, tau=DEFAULT_TAU, sigma=DEFAULT_SIGMA, frame_index=0) -> AssociationResult:
    """Attach to the best landmark if its unnormalised weight reaches ``tau``,
    otherwise create a landmark at the measurement."""
    aw = association_weights(measurement, registry, pose, p0, pc, sigma)
    if aw.ids and aw.max_unnormalized >= tau:
        return AssociationResult(aw.argmax(), False, aw)
    m = _world_model(measurement, pose)
    lm = registry.create(m, frame_index)
    return AssociationResult(lm.id, True, aw)


def feature_point_association(point_world, detection_landmark: Optional[int], label: str, landmarks, tol=0.0, outliers=OUTLIER_LABELS) -> Optional[int]:
    """Bind a triangulated point to the landmark its detection was associated
    with, provided the point lies inside the landmark's volume (truncation
    residual norm <= ``tol``)."""
    if label in outliers or detection_landmark is None:
        return None
    lm = landmarks.get(detection_landmark) if hasattr(landmarks, "get") else {l.id: l for l in landmarks}[detection_landmark]
    r = residual_point_landmark(np.asarray(point_world, float), lm.model)
    return detection_landmark if float(np.linalg.norm(r)) <= tol else None
