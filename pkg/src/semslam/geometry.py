"""Camera model, rigid poses, ground-plane back-projection and box projection.

Conventions
-----------
A :class:`Pose` ``(R, t)`` maps points from a source frame into a target
frame, ``X_target = R @ X_source + t``. Names follow ``target_from_source``:
``cam_from_ground`` maps ground-frame points into the camera frame.

Pixel coordinates are continuous; the image covers ``[0, width] x [0, height]``.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np

from .lie import hat, se3_exp, se3_log, so3_exp

N_CIRCLE_SAMPLES = 32
MIN_DEPTH = 1e-6


class GeometryError(ValueError):
    pass


class NonPositiveDepth(GeometryError):
    pass


class RayParallelToPlane(GeometryError):
    pass


class IntersectionBehindCamera(GeometryError):
    pass


class ModelBehindCamera(GeometryError):
    pass


class ModelOutsideImage(GeometryError):
    """The projected model does not overlap the image at all."""


def _vec(v, n=3):
    a = np.array(v, dtype=float).reshape(-1)
    if a.shape != (n,):
        raise ValueError(f"expected a {n}-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("vector contains non-finite values")
    a.setflags(write=False)
    return a


def wrap_angle(a):
    """Wrap an angle into ``(-pi, pi]``."""
    a = math.remainder(float(a), 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


def rot_z(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_z_derivative(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def K_inv(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def contains(self, pixel, margin=0.0):
        u, v = pixel
        return (
            margin <= u <= self.width - margin and margin <= v <= self.height - margin
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R @ x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = _vec(self.translation)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def exp(cls, xi):
        R, t = se3_exp(xi)
        return cls(R, t)

    @classmethod
    def from_xyz_rpy(cls, xyz, rpy):
        roll, pitch, yaw = rpy
        R = so3_exp([0, 0, yaw]) @ so3_exp([0, pitch, 0]) @ so3_exp([roll, 0, 0])
        return cls(R, xyz)

    def log(self):
        return se3_log(self.rotation, self.translation)

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self @ other``: apply ``other`` first."""
        R = self.rotation @ other.rotation
        # keep R orthonormal across long composition chains
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return Pose(R, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def retract(self, delta):
        """Right perturbation ``self @ Exp(delta)``."""
        return self.compose(Pose.exp(delta))

    def apply(self, points):
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def __repr__(self):
        return f"Pose(t={np.round(self.translation, 6).tolist()}, r={np.round(self.log()[3:], 6).tolist()})"


def apply_pose(pose: Pose, point):
    return pose.apply(_vec(point))


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def invert(pose: Pose) -> Pose:
    return pose.inverse()


def project(intr: CameraIntrinsics, point_cam):
    x, y, z = _vec(point_cam)
    if z <= 0:
        raise NonPositiveDepth(f"point depth {z} is not positive")
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])


def project_points(intr: CameraIntrinsics, points_cam):
    """Vectorised pinhole projection; no depth check."""
    P = np.asarray(points_cam, dtype=float)
    z = P[..., 2]
    return np.stack(
        [intr.fx * P[..., 0] / z + intr.cx, intr.fy * P[..., 1] / z + intr.cy], axis=-1
    )


def projection_jacobian(intr: CameraIntrinsics, point_cam):
    x, y, z = point_cam
    iz = 1.0 / z
    return np.array(
        [
            [intr.fx * iz, 0.0, -intr.fx * x * iz * iz],
            [0.0, intr.fy * iz, -intr.fy * y * iz * iz],
        ]
    )


@dataclass(frozen=True, eq=False)
class GroundPlane:
    """Plane ``{X : normal . X = offset}``."""

    normal: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        n = _vec(self.normal)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    def signed_distance(self, points):
        return np.asarray(points, dtype=float) @ self.normal - self.offset

    def cam_from_ground(self) -> Pose:
        """Pose of a ground frame (z along the normal, x along the camera's
        forward direction projected on the plane) seen from the plane's frame.

        The plane must be expressed in the camera frame with its normal
        pointing toward the camera centre.
        """
        z = self.normal
        fwd = np.array([0.0, 0.0, 1.0])
        x = fwd - (fwd @ z) * z
        if np.linalg.norm(x) < 1e-9:
            x = np.array([1.0, 0.0, 0.0]) - z[0] * z
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        return Pose(np.column_stack([x, y, z]), self.offset * z)


Z_UP_GROUND = GroundPlane(np.array([0.0, 0.0, 1.0]), 0.0)


def backproject_ground(intr: CameraIntrinsics, cam_from_ground: Pose, pixel):
    """Intersect the viewing ray of ``pixel`` with the ground plane ``z = 0``.

    Returns the intersection in ground-frame coordinates.
    """
    R, t = cam_from_ground.rotation, cam_from_ground.translation
    u, v = _vec(pixel, 2)
    m_c = intr.K_inv @ np.array([u, v, 1.0])
    c_g = -R.T @ t
    m_g = R.T @ (m_c - t)
    d = m_g - c_g
    if abs(d[2]) <= 1e-9 * max(1.0, np.linalg.norm(d)):
        raise RayParallelToPlane(f"ray through pixel {(u, v)} is parallel to ground")
    lam = -c_g[2] / d[2]
    if lam <= 0:
        raise IntersectionBehindCamera(f"ground intersection for pixel {(u, v)} is behind camera")
    X = c_g + lam * d
    X[2] = 0.0
    return X


@dataclass(frozen=True, eq=False)
class CylinderModel:
    center: np.ndarray
    height: float
    radius: float
    label: str = "chair"

    shape = "cylinder"

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center))
        if not (self.height > 0 and self.radius > 0):
            raise ValueError("cylinder height and radius must be positive")

    @property
    def yaw(self):
        return 0.0

    @property
    def dims(self):
        return {"height": float(self.height), "radius": float(self.radius)}

    def offsets(self):
        """Ring samples around both end circles, ``N_CIRCLE_SAMPLES`` each.

        Boxes use the exact circle extremes; these samples cover the case of
        a circle crossing the camera plane.
        """
        return _cylinder_offsets(self.radius, self.height)

    def moved(self, center, yaw=None):
        return CylinderModel(center, self.height, self.radius, self.label)

    def samples(self):
        return self.center + self.offsets()


@dataclass(frozen=True, eq=False)
class CuboidModel:
    center: np.ndarray
    dims: np.ndarray
    yaw: float = 0.0
    label: str = "sofa"

    shape = "cuboid"

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center))
        object.__setattr__(self, "dims", _vec(self.dims))
        if np.any(self.dims <= 0):
            raise ValueError("cuboid dimensions must be positive")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def height(self):
        return float(self.dims[2])

    def offsets(self):
        """The 8 corner offsets from the centre, rotated by ``yaw``."""
        return _cuboid_corners(self.dims) @ rot_z(self.yaw).T

    def moved(self, center, yaw=None):
        return CuboidModel(center, self.dims, self.yaw if yaw is None else yaw, self.label)

    def samples(self):
        return self.center + self.offsets()


LandmarkModel = Union[CylinderModel, CuboidModel]


@lru_cache(maxsize=256)
def _cylinder_offsets_cached(radius, height):
    ang = 2.0 * np.pi * np.arange(N_CIRCLE_SAMPLES) / N_CIRCLE_SAMPLES
    ring = np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])
    bottom = np.column_stack([ring, np.full(N_CIRCLE_SAMPLES, -0.5 * height)])
    top = np.column_stack([ring, np.full(N_CIRCLE_SAMPLES, 0.5 * height)])
    out = np.vstack([bottom, top])
    out.flags.writeable = False
    return out


def _cylinder_offsets(radius, height):
    return _cylinder_offsets_cached(float(radius), float(height))


def _circle_extreme_angles(q0, a, b):
    """Angles where ``x/z`` and ``y/z`` of ``q0 + a cos(th) + b sin(th)``
    are extremal, two per coordinate, batched over the leading axis.

    Setting the derivative of ``N(th) / D(th)`` to zero leaves
    ``A cos(th) + B sin(th) + C = 0``.
    """
    n0, n1, n2 = q0[:, :2], a[:, :2], b[:, :2]
    d0, d1, d2 = q0[:, 2:], a[:, 2:], b[:, 2:]
    A = n2 * d0 - n0 * d2
    B = n0 * d1 - n1 * d0
    C = n2 * d1 - n1 * d2
    rho = np.hypot(A, B)
    phi = np.arctan2(B, A)
    delta = np.arccos(np.clip(-C / np.maximum(rho, 1e-300), -1.0, 1.0))
    return np.concatenate([phi + delta, phi - delta], axis=1)  # (M, 4)


def cylinder_silhouette_offsets(radius, height, center, R_cm, t_cm):
    """Offsets (from the centre) of the points that bound the projected
    cylinder, batched over K cylinders/views.

    The image of a cylinder is the convex hull of its two end circles, so
    its box is set by the extreme points of those circles, found in closed
    form. Returns ``offsets (K, 8, 3)`` and ``in_front (K,)``; the offsets
    are only meaningful where both circles lie entirely in front of the
    camera.
    """
    K = len(R_cm)
    radius = np.broadcast_to(np.asarray(radius, float), (K,))
    half = 0.5 * np.broadcast_to(np.asarray(height, float), (K,))
    z = np.concatenate([-half, half])  # bottom circles, then top circles
    r2 = np.concatenate([radius, radius])[:, None]
    R2 = np.concatenate([R_cm, R_cm])
    q0 = (R2 @ np.concatenate([center, center])[:, :, None])[:, :, 0] + z[:, None] * R2[:, :, 2] + np.concatenate([t_cm, t_cm])
    a, b = r2 * R2[:, :, 0], r2 * R2[:, :, 1]
    front = q0[:, 2] - np.hypot(a[:, 2], b[:, 2]) > MIN_DEPTH
    th = _circle_extreme_angles(q0, a, b)
    ring = np.empty((2 * K, 4, 3))
    ring[:, :, 0] = r2 * np.cos(th)
    ring[:, :, 1] = r2 * np.sin(th)
    ring[:, :, 2] = z[:, None]
    return np.concatenate([ring[:K], ring[K:]], axis=1), front[:K] & front[K:]


def _silhouette_offsets(model, cam_from_model_frame: Pose):
    """Offsets whose projections bound the model's image."""
    if isinstance(model, CylinderModel):
        offs, front = cylinder_silhouette_offsets(
            model.radius, model.height, model.center[None], cam_from_model_frame.rotation[None],
            cam_from_model_frame.translation[None],
        )
        if front[0]:
            return offs[0]
    return model.offsets()


_CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sz in (-1, 1) for sy in (-1, 1) for sx in (-1, 1)], dtype=float
)

# corner index pairs forming the 12 cuboid edges
CUBOID_EDGES = [
    (0, 1), (2, 3), (4, 5), (6, 7),
    (0, 2), (1, 3), (4, 6), (5, 7),
    (0, 4), (1, 5), (2, 6), (3, 7),
]


def _cuboid_corners(dims):
    return 0.5 * _CORNER_SIGNS * np.asarray(dims, dtype=float)


@dataclass(frozen=True)
class BBox2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @classmethod
    def from_array(cls, a):
        return cls(*(float(x) for x in a))

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def as_array(self):
        return np.array(self.as_tuple())

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return np.array([0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)])

    @property
    def diagonal(self):
        return math.hypot(self.width, self.height)

    def contains(self, pixel, margin=0.0):
        u, v = pixel
        return (
            self.x_min - margin <= u <= self.x_max + margin
            and self.y_min - margin <= v <= self.y_max + margin
        )


def iou(a: BBox2D, b: BBox2D) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


class BoxProjection(NamedTuple):
    bbox: BBox2D
    clamped: bool
    visibility: float
    raw: np.ndarray
    width_ratio: Optional[float] = None


def _raw_box(pixels):
    return np.array(
        [pixels[:, 0].min(), pixels[:, 1].min(), pixels[:, 0].max(), pixels[:, 1].max()]
    )


def clamp_box(raw, intr: CameraIntrinsics):
    lo = np.array([0.0, 0.0, 0.0, 0.0])
    hi = np.array([intr.width, intr.height, intr.width, intr.height], dtype=float)
    return np.minimum(np.maximum(raw, lo), hi)


def project_model_bbox(model: LandmarkModel, cam_from_model_frame: Pose, intr: CameraIntrinsics) -> BoxProjection:
    """Project a cylinder (exact end-circle extremes) or cuboid (8 corners) and take
    the axis-aligned extent, clamped to the image.

    ``cam_from_model_frame`` maps the frame in which ``model.center`` is
    expressed into the camera frame.
    """
    offsets = _silhouette_offsets(model, cam_from_model_frame)
    exact = isinstance(model, CylinderModel) and len(offsets) == 8
    pts = cam_from_model_frame.apply(model.center + offsets)
    front = pts[:, 2] > MIN_DEPTH
    if not front.any():
        raise ModelBehindCamera("all model samples are behind the camera")
    px = project_points(intr, pts[front])
    raw = _raw_box(px)
    box = clamp_box(raw, intr)
    clamped = bool(not front.all() or np.any(box != raw))
    if box[0] >= box[2] or box[1] >= box[3]:
        raise ModelOutsideImage("projected model lies outside the image")
    raw_area = (raw[2] - raw[0]) * (raw[3] - raw[1])
    vis = ((box[2] - box[0]) * (box[3] - box[1]) / raw_area) if raw_area > 0 else 0.0
    ratio = None
    if exact:
        w_bottom = np.ptp(px[:4, 0])
        w_top = np.ptp(px[4:, 0])
        ratio = float(w_top / w_bottom) if w_bottom > 0 else None
    return BoxProjection(BBox2D.from_array(box), clamped, float(vis), raw, ratio)


def model_box_jacobians(model: LandmarkModel, cam_from_model_frame: Pose, intr: CameraIntrinsics):
    """Raw (unclamped) box of ``model`` with first-order sensitivities.

    Returns ``raw, clamp_mask, J_center, J_yaw, J_pose`` where the Jacobians
    have 4 rows ordered ``(x_min, y_min, x_max, y_max)``. ``J_pose`` is taken
    w.r.t. a right perturbation of ``model_frame_from_cam`` (the camera's pose
    in the model frame). Clamped components get zero rows.
    """
    R_cm, t_cm = cam_from_model_frame.rotation, cam_from_model_frame.translation
    offsets = _silhouette_offsets(model, cam_from_model_frame)
    pts = (model.center + offsets) @ R_cm.T + t_cm
    if np.any(pts[:, 2] <= MIN_DEPTH):
        raise ModelBehindCamera("model sample behind camera")
    px = project_points(intr, pts)
    idx = [
        int(np.argmin(px[:, 0])),
        int(np.argmin(px[:, 1])),
        int(np.argmax(px[:, 0])),
        int(np.argmax(px[:, 1])),
    ]
    raw = np.array([px[idx[0], 0], px[idx[1], 1], px[idx[2], 0], px[idx[3], 1]])
    box = clamp_box(raw, intr)
    mask = box != raw
    J_c = np.zeros((4, 3))
    J_yaw = np.zeros(4)
    J_pose = np.zeros((4, 6))
    dRz = rot_z_derivative(model.yaw)
    base = offsets @ rot_z(model.yaw)  # un-yawed offsets
    for row, k in enumerate(idx):
        if mask[row]:
            continue
        comp = row % 2
        jp = projection_jacobian(intr, pts[k])[comp]  # d pixel / d X_cam
        J_c[row] = jp @ R_cm
        J_yaw[row] = jp @ R_cm @ (dRz @ base[k])
        J_pose[row, :3] = -jp
        J_pose[row, 3:] = jp @ hat(pts[k])
    return raw, mask, J_c, J_yaw, J_pose
