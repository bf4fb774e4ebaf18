"""3D landmark proposals from 2D detections, lines and the local ground plane.

Proposals are built in a local ground frame (z along the estimated ground
normal, origin below the camera) and carry the ``cam_from_ground`` pose that
places them in the camera frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points
from .geometry import (
    CUBOID_EDGES,
    BBox2D,
    CameraIntrinsics,
    CuboidModel,
    CylinderModel,
    GeometryError,
    GroundPlane,
    LandmarkModel,
    Pose,
    _CORNER_SIGNS,
    backproject_ground,
    iou,
    model_box_jacobians,
    project,
    project_model_bbox,
    project_points,
)
from .world_sim import Frame, LineSegment

IOU_GATE = 0.3
MAX_HYPOTHESES = 5
LEG_MAX_TILT = math.radians(30.0)
LEG_MIN_REL_LENGTH = 0.1
LINE_MARGIN_PX = 3.0


class NoGroundIntersection(GeometryError):
    pass


class DegenerateInput(ValueError):
    pass


# -- object database ---------------------------------------------------------


@dataclass(frozen=True)
class DbEntry:
    shape: str
    dims: tuple  # cylinder: (height, radius); cuboid: (width, length, height)

    def __post_init__(self):
        if self.shape not in ("cylinder", "cuboid"):
            raise ValueError(f"unknown shape {self.shape!r}")
        n = 2 if self.shape == "cylinder" else 3
        if len(self.dims) != n or any(d <= 0 for d in self.dims):
            raise ValueError(f"{self.shape} needs {n} positive dims, got {self.dims}")

    @property
    def height(self):
        return self.dims[0] if self.shape == "cylinder" else self.dims[2]

    def make_model(self, center, yaw=0.0, label=""):
        if self.shape == "cylinder":
            return CylinderModel(center, self.dims[0], self.dims[1], label)
        return CuboidModel(center, self.dims, yaw, label)

    def to_dict(self):
        if self.shape == "cylinder":
            return {"shape": "cylinder", "dims": {"height": self.dims[0], "radius": self.dims[1]}}
        w, l, h = self.dims
        return {"shape": "cuboid", "dims": {"width": w, "length": l, "height": h}}

    @classmethod
    def from_dict(cls, d):
        dims = d["dims"]
        if d["shape"] == "cylinder":
            return cls("cylinder", (float(dims["height"]), float(dims["radius"])))
        return cls(d["shape"], (float(dims["width"]), float(dims["length"]), float(dims["height"])))


class ObjectDatabase(dict):
    """Mapping ``label -> DbEntry``; labels absent from it are outliers."""

    @classmethod
    def from_dict(cls, d):
        return cls({label: DbEntry.from_dict(v) for label, v in d.items()})

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return {label: e.to_dict() for label, e in sorted(self.items())}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def model_for(self, label, center, yaw=0.0):
        return self[label].make_model(center, yaw, label)


DEFAULT_DATABASE = ObjectDatabase(
    {
        "chair": DbEntry("cylinder", (1.0, 0.3)),
        "sofa": DbEntry("cuboid", (1.8, 0.9, 0.8)),
        "door": DbEntry("cuboid", (0.9, 0.1, 2.0)),
    }
)


# -- proposals ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Proposal3D:
    model: LandmarkModel  # in the local ground frame
    cam_from_ground: Pose
    det_index: int
    label: str
    score: float
    centroid_px: np.ndarray
    iou_with_bbox: float
    clamped: bool
    bbox: BBox2D
    visibility: float = 1.0

    @property
    def center_cam(self):
        return self.cam_from_ground.apply(self.model.center)

    def in_frame(self, target_from_cam: Pose) -> LandmarkModel:
        """The model expressed in another frame, e.g. world via ``world_from_cam``."""
        T = target_from_cam @ self.cam_from_ground
        center = T.apply(self.model.center)
        R = T.rotation
        yaw = math.atan2(R[1, 0], R[0, 0]) + self.model.yaw
        return self.model.moved(center, yaw)


def _lines_in_box(lines, box: BBox2D):
    return [s for s in lines if box.contains(s.p0, LINE_MARGIN_PX) and box.contains(s.p1, LINE_MARGIN_PX)]


def _finish(model, cam_from_ground, det_index, det, intr, extra_factor=1.0):
    try:
        proj = project_model_bbox(model, cam_from_ground, intr)
        c_px = project(intr, cam_from_ground.apply(model.center))
    except GeometryError:
        return None
    overlap = iou(proj.bbox, det.bbox)
    if not overlap > IOU_GATE:
        return None
    s = float(np.clip(overlap * proj.visibility * extra_factor, 0.0, 1.0))
    return Proposal3D(model, cam_from_ground, det_index, det.label, s, c_px, overlap, proj.clamped, proj.bbox, proj.visibility)


def _fit_ground_center(model, cam_from_ground, intr, target, basis, iters=30):
    """Gauss-Newton fit of the model's ground position so its projected box
    matches ``target``. ``basis`` (3 x k) spans the allowed motion."""
    for _ in range(iters):
        try:
            raw, mask, J_c, _, _ = model_box_jacobians(model, cam_from_ground, intr)
        except GeometryError:
            return None
        r = np.where(mask, 0.0, raw - target)
        J = J_c @ basis
        if not np.all(np.isfinite(J)):
            return None
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        # bound steps to keep the model in front of the camera
        n = np.linalg.norm(step)
        if n > 0.5:
            step *= 0.5 / n
        model = model.moved(model.center + basis @ step)
        if n < 1e-10:
            break
    return model


def _leg_intersection(seg: LineSegment, box: BBox2D):
    d = np.asarray(seg.p1) - np.asarray(seg.p0)
    if abs(d[1]) < 1e-9:
        return None
    if math.atan2(abs(d[0]), abs(d[1])) > LEG_MAX_TILT:
        return None
    x = seg.p0[0] + (box.y_max - seg.p0[1]) * d[0] / d[1]
    if not box.x_min <= x <= box.x_max:
        return None
    return np.array([x, box.y_max])


def _ground_ray(intr, cam_from_ground, pixel):
    return cam_from_ground.rotation.T @ (intr.K_inv @ np.array([pixel[0], pixel[1], 1.0]))


def cylinder_proposals(
    frame: Frame,
    i: int,
    ground: GroundPlane,
    intr: CameraIntrinsics,
    db: ObjectDatabase,
    cam_from_ground: Optional[Pose] = None,
) -> List[Proposal3D]:
    """Grounded cylinder hypotheses for detection ``i``.

    A near-vertical leg segment is extended to the box's bottom edge; the
    resulting grounding pixel is back-projected and then slid along the
    ground trace of the leg's viewing plane until the reprojected cylinder
    fits the box. Without a usable leg, short segments near the box vote for
    up to :data:`MAX_HYPOTHESES` grounding pixels stepped upward from the
    bottom edge.
    """
    det = frame.detections[i]
    entry = db.get(det.label)
    if entry is None or entry.shape != "cylinder":
        raise ValueError(f"label {det.label!r} has no cylinder entry")
    if cam_from_ground is None:
        cam_from_ground = ground.cam_from_ground()
    h, r = entry.dims
    box = det.bbox
    lines = _lines_in_box(frame.line_obs, box)
    min_len = LEG_MIN_REL_LENGTH * box.height

    legs = []
    for seg in lines:
        if seg.length < min_len:
            continue
        p = _leg_intersection(seg, box)
        if p is not None:
            legs.append((p, seg))
    hypotheses = []  # (pixel, ground direction or None)
    for p, seg in legs[:MAX_HYPOTHESES]:
        n = np.cross(_ground_ray(intr, cam_from_ground, seg.p0), _ground_ray(intr, cam_from_ground, seg.p1))
        u = np.cross(n, [0.0, 0.0, 1.0])
        nu = np.linalg.norm(u)
        hypotheses.append((p, u / nu if nu > 1e-12 else None))
    if not hypotheses:
        votes = sorted({float(np.clip(0.5 * (s.p0[0] + s.p1[0]), box.x_min, box.x_max)) for s in lines})
        step = 0.02 * box.height
        for x in votes:
            for k in range(MAX_HYPOTHESES):
                hypotheses.append((np.array([x, box.y_max - k * step]), None))
        hypotheses = hypotheses[:MAX_HYPOTHESES]
    if not hypotheses:
        return []

    out = []
    hit = False
    target = box.as_array()
    for pixel, direction in hypotheses:
        try:
            X = backproject_ground(intr, cam_from_ground, pixel)
        except GeometryError:
            continue
        hit = True
        model = CylinderModel([X[0], X[1], 0.5 * h], h, r, det.label)
        if direction is not None:
            fitted = _fit_ground_center(model, cam_from_ground, intr, target, direction.reshape(3, 1))
            if fitted is not None:
                model = fitted
        p = _finish(model, cam_from_ground, i, det, intr)
        if p is not None:
            out.append(p)
    if not hit:
        raise NoGroundIntersection(f"no grounding ray of detection {i} meets the ground")
    out.sort(key=lambda p: -p.score)
    return out


_EDGE_I = np.array([e[0] for e in CUBOID_EDGES])
_EDGE_J = np.array([e[1] for e in CUBOID_EDGES])


def _alignment_scores(px, lines):
    """Batched line alignment for projected corners ``px`` of shape (Y, 8, 2)."""
    if not lines:
        return np.ones(len(px))
    P0 = np.array([seg.p0 for seg in lines], dtype=float)
    P1 = np.array([seg.p1 for seg in lines], dtype=float)
    mid = 0.5 * (P0 + P1)
    d_obs = P1 - P0
    A, B = px[:, _EDGE_I], px[:, _EDGE_J]  # (Y, 12, 2)
    AB = B - A
    L = np.einsum("yej,yej->ye", AB, AB)
    rel = mid[None, :, None, :] - A[:, None, :, :]  # (Y, M, 12, 2)
    s = np.clip(np.einsum("ymej,yej->yme", rel, AB) / np.where(L > 0, L, 1.0)[:, None, :], 0.0, 1.0)
    dist = np.linalg.norm(rel - s[..., None] * AB[:, None], axis=3)
    best = np.argmin(dist, axis=2)  # (Y, M)
    d_edge = np.take_along_axis(AB, best[..., None], axis=1)  # (Y, M, 2)
    diff = np.abs(np.arctan2(d_obs[:, 1], d_obs[:, 0])[None] - np.arctan2(d_edge[..., 1], d_edge[..., 0])) % math.pi
    return np.maximum(0.0, 1.0 - np.mean(np.minimum(diff, math.pi - diff), axis=1) / (0.5 * math.pi))


def line_alignment(model: CuboidModel, cam_from_ground: Pose, intr, lines) -> float:
    """1 - (mean angle between each observed segment and its nearest
    projected cuboid edge) / (pi/2). Returns 1 when there are no segments."""
    if not lines:
        return 1.0
    pts = cam_from_ground.apply(model.samples())
    if np.any(pts[:, 2] <= 1e-6):
        return 0.0
    return float(_alignment_scores(project_points(intr, pts)[None], lines)[0])


def _fit_cuboids(start_xy, yaws, dims, h, cam_from_ground, intr, target, iters=30):
    """Batched Gauss-Newton over orientations: ground position (x, y) of a
    cuboid at each yaw so that its projected box matches ``target``.

    Returns ``(centers (Y, 3), corners_px (Y, 8, 2), valid (Y,))``.
    """
    R, t = cam_from_ground.rotation, cam_from_ground.translation
    c, s = np.cos(yaws), np.sin(yaws)
    Rz = np.zeros((len(yaws), 3, 3))
    Rz[:, 0, 0], Rz[:, 0, 1], Rz[:, 1, 0], Rz[:, 1, 1], Rz[:, 2, 2] = c, -s, s, c, 1.0
    off = np.einsum("yij,kj->yki", Rz, 0.5 * _CORNER_SIGNS * np.asarray(dims, float))
    Y = len(yaws)
    centers = np.column_stack([np.broadcast_to(start_xy, (Y, 2)), np.full(Y, 0.5 * h)])
    valid = np.ones(Y, dtype=bool)
    active = np.ones(Y, dtype=bool)
    hi = np.array([intr.width, intr.height, intr.width, intr.height], float)
    rows = np.arange(Y)
    for _ in range(iters):
        pc = (centers[:, None, :] + off) @ R.T + t
        z = pc[..., 2]
        bad = np.any(z <= 1e-6, axis=1)
        valid &= ~bad
        active &= valid
        if not active.any():
            break
        zs = np.where(z > 1e-6, z, 1.0)
        u = intr.fx * pc[..., 0] / zs + intr.cx
        v = intr.fy * pc[..., 1] / zs + intr.cy
        idx = np.stack([u.argmin(1), v.argmin(1), u.argmax(1), v.argmax(1)], axis=1)
        raw = np.stack([u[rows, idx[:, 0]], v[rows, idx[:, 1]], u[rows, idx[:, 2]], v[rows, idx[:, 3]]], axis=1)
        mask = (raw < 0) | (raw > hi)
        r = np.where(mask, 0.0, raw - target)
        J = np.zeros((Y, 4, 2))
        for row in range(4):
            k = idx[:, row]
            X, Yc, Z = pc[rows, k, 0], pc[rows, k, 1], zs[rows, k]
            if row % 2 == 0:
                jp = np.stack([intr.fx / Z, np.zeros(Y), -intr.fx * X / Z**2], axis=1)
            else:
                jp = np.stack([np.zeros(Y), intr.fy / Z, -intr.fy * Yc / Z**2], axis=1)
            J[:, row, :] = np.where(mask[:, row, None], 0.0, jp @ R[:, :2])
        H = np.einsum("yki,ykj->yij", J, J)
        g = np.einsum("yki,yk->yi", J, r)
        reg = 1e-9 * (np.trace(H, axis1=1, axis2=2) + 1e-12)
        H = H + reg[:, None, None] * np.eye(2)
        step = -np.linalg.solve(H, g[..., None])[..., 0]
        n = np.linalg.norm(step, axis=1)
        step *= np.minimum(1.0, 0.5 / np.maximum(n, 1e-300))[:, None]
        step[~active] = 0.0
        centers[:, :2] += step
        active &= n >= 1e-10
        if not active.any():
            break
    pc = (centers[:, None, :] + off) @ R.T + t
    valid &= np.all(pc[..., 2] > 1e-6, axis=1)
    zs = np.where(pc[..., 2] > 1e-6, pc[..., 2], 1.0)
    px = np.stack([intr.fx * pc[..., 0] / zs + intr.cx, intr.fy * pc[..., 1] / zs + intr.cy], axis=2)
    return centers, px, valid


def cuboid_proposals(
    frame: Frame,
    i: int,
    ground: GroundPlane,
    intr: CameraIntrinsics,
    db: ObjectDatabase,
    yaw_samples: int = 36,
    cam_from_ground: Optional[Pose] = None,
) -> List[Proposal3D]:
    """Grounded cuboid hypotheses over ``yaw_samples`` orientations in [0, pi).

    Each orientation is placed from the back-projected bottom-centre pixel of
    the box, fitted so its projection matches the box, and ranked by box IOU
    plus line alignment.
    """
    det = frame.detections[i]
    entry = db.get(det.label)
    if entry is None or entry.shape != "cuboid":
        raise ValueError(f"label {det.label!r} has no cuboid entry")
    if yaw_samples < 1:
        raise ValueError("yaw_samples must be >= 1")
    if cam_from_ground is None:
        cam_from_ground = ground.cam_from_ground()
    box = det.bbox
    w, l, h = entry.dims
    try:
        G = backproject_ground(intr, cam_from_ground, (box.center[0], box.y_max))
    except GeometryError as exc:
        raise NoGroundIntersection(str(exc)) from exc
    cam_g = -cam_from_ground.rotation.T @ cam_from_ground.translation
    away = G[:2] - cam_g[:2]
    away = away / max(np.linalg.norm(away), 1e-12)
    lines = _lines_in_box(frame.line_obs, box)
    target = box.as_array()
    yaws = np.arange(yaw_samples) * math.pi / yaw_samples
    start = G[:2] + away * 0.5 * min(w, l)
    centers, px, valid = _fit_cuboids(start, yaws, (w, l, h), h, cam_from_ground, intr, target)
    raw = np.stack([px[..., 0].min(1), px[..., 1].min(1), px[..., 0].max(1), px[..., 1].max(1)], axis=1)
    clip = np.clip(raw, 0.0, [intr.width, intr.height, intr.width, intr.height])
    area = (clip[:, 2] - clip[:, 0]).clip(0) * (clip[:, 3] - clip[:, 1]).clip(0)
    inter = (np.minimum(clip[:, 2], box.x_max) - np.maximum(clip[:, 0], box.x_min)).clip(0) * (
        np.minimum(clip[:, 3], box.y_max) - np.maximum(clip[:, 1], box.y_min)
    ).clip(0)
    overlap = inter / np.maximum(area + box.area - inter, 1e-12)
    align = _alignment_scores(px, lines)
    key = np.where(valid & (overlap > IOU_GATE), overlap + align, -np.inf)
    ranked = []
    for k in sorted(range(yaw_samples), key=lambda k: (-key[k], k)):
        if not np.isfinite(key[k]) or len(ranked) == MAX_HYPOTHESES:
            break
        model = CuboidModel(centers[k], (w, l, h), yaws[k], det.label)
        p = _finish(model, cam_from_ground, i, det, intr, extra_factor=align[k])
        if p is not None:
            ranked.append(p)
    return ranked


def frame_proposals(frame: Frame, ground: GroundPlane, intr, db: ObjectDatabase, yaw_samples=36, cam_from_ground=None) -> Dict[int, List[Proposal3D]]:
    """Proposals for every detection in ``frame`` whose label is in ``db``."""
    if cam_from_ground is None:
        cam_from_ground = ground.cam_from_ground()
    out = {}
    for i, det in enumerate(frame.detections):
        entry = db.get(det.label)
        if entry is None:
            continue
        try:
            if entry.shape == "cylinder":
                props = cylinder_proposals(frame, i, ground, intr, db, cam_from_ground)
            else:
                props = cuboid_proposals(frame, i, ground, intr, db, yaw_samples, cam_from_ground)
        except NoGroundIntersection:
            props = []
        out[i] = props
    return out


# -- ground plane ------------------------------------------------------------


class GroundPlaneRANSAC(BaseEstimator):
    """RANSAC plane fit with least-squares refinement on the inliers.

    Parameters
    ----------
    threshold : float, default=0.02
        Inlier distance to the plane, in meters.
    n_iterations : int, default=100
        Number of random 3-point hypotheses.
    random_state : int, default=0
        Seed for hypothesis sampling.

    Attributes
    ----------
    plane_ : GroundPlane
        Fitted plane, normal oriented toward the origin (camera centre).
    inlier_mask_ : ndarray of shape (n_points,)
    n_inliers_ : int
    """

    def __init__(self, threshold=0.02, n_iterations=100, random_state=0):
        self.threshold = threshold
        self.n_iterations = n_iterations
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_points(X, min_points=3)
        centered = X - X.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-9 * max(1.0, np.abs(centered).max())) < 2:
            raise DegenerateInput("points are collinear")
        rng = np.random.default_rng(self.random_state)
        n = len(X)
        idx = np.argsort(rng.random((self.n_iterations, n)), axis=1)[:, :3]
        a, b, c = X[idx[:, 0]], X[idx[:, 1]], X[idx[:, 2]]
        normals = np.cross(b - a, c - a)
        norms = np.linalg.norm(normals, axis=1)
        ok = norms > 1e-12
        if not ok.any():
            raise DegenerateInput("no non-degenerate sample triple")
        normals = normals[ok] / norms[ok, None]
        offsets = np.einsum("ij,ij->i", normals, a[ok])
        dist = np.abs(X @ normals.T - offsets)
        counts = (dist < self.threshold).sum(axis=0)
        best = int(np.argmax(counts))
        inliers = dist[:, best] < self.threshold
        normal, offset = _lsq_plane(X[inliers])
        self.plane_ = _orient(normal, offset)
        self.inlier_mask_ = np.abs(self.plane_.signed_distance(X)) < self.threshold
        self.n_inliers_ = int(self.inlier_mask_.sum())
        return self

    def predict(self, X):
        """Boolean inlier mask for new points."""
        check_is_fitted(self, "plane_")
        X = check_points(X)
        return np.abs(self.plane_.signed_distance(X)) < self.threshold

    @property
    def normal_(self):
        check_is_fitted(self, "plane_")
        return self.plane_.normal

    @property
    def offset_(self):
        check_is_fitted(self, "plane_")
        return self.plane_.offset


def _lsq_plane(P):
    c = P.mean(axis=0)
    _, _, vt = np.linalg.svd(P - c)
    n = vt[-1]
    return n, float(n @ c)


def _orient(normal, offset):
    if offset > 0:
        normal, offset = -normal, -offset
    normal = normal / np.linalg.norm(normal)
    return GroundPlane(normal, offset + 0.0)


def ground_plane_estimate(points, threshold=0.02, n_iterations=100, seed=0):
    """Fit the ground plane to camera-frame points; returns ``(plane, n_inliers)``."""
    est = GroundPlaneRANSAC(threshold, n_iterations, seed).fit(points)
    return est.plane_, est.n_inliers_
