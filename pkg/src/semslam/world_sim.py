"""Deterministic synthetic front-end: world, trajectory and noisy frames.

Stands in for the image detector and feature tracker. All randomness is drawn
from generators keyed on ``(seed, frame, entity, stream)`` so a frame's noise
does not depend on how many other frames or entities were simulated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

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
    Z_UP_GROUND,
    backproject_ground,
    clamp_box,
    project_model_bbox,
    project_points,
)

VISIBLE_DEPTH = (0.3, 10.0)
LEG_FRACTION = 0.4
PERSON_LABEL = "person"

# noise streams
_S_DETECT, _S_BBOX, _S_SCORE, _S_LINE, _S_PIXEL, _S_ODOM, _S_GROUND = range(7)
_PERSON_BASE = 1_000_000
_GROUND_ENTITY = 2_000_000
_FEATURE_NOISE_ENTITY = 2_000_001


def keyed_rng(seed, frame, entity, stream):
    """Counter-style generator: independent stream per key tuple."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(frame), int(entity), int(stream)])


@dataclass(frozen=True)
class NoiseConfig:
    bbox_sigma: float = 2.0
    pixel_sigma: float = 1.0
    odom_rot_sigma: float = 0.005
    odom_trans_sigma: float = 0.01
    detect_prob: float = 1.0
    seed: int = 0
    depth_sigma: float = 0.005

    def __post_init__(self):
        for name in ("bbox_sigma", "pixel_sigma", "odom_rot_sigma", "odom_trans_sigma", "depth_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.detect_prob <= 1.0:
            raise ValueError("detect_prob must be in [0, 1]")

    @classmethod
    def noiseless(cls, seed=0):
        return cls(0.0, 0.0, 0.0, 0.0, 1.0, seed, 0.0)


@dataclass(frozen=True)
class PersonTrack:
    """A walking person: a dynamic object with no stable 3D landmark."""

    start: tuple
    velocity: tuple = (0.0, 0.0)
    height: float = 1.7
    radius: float = 0.25

    def model_at(self, time):
        x = self.start[0] + self.velocity[0] * time
        y = self.start[1] + self.velocity[1] * time
        return CylinderModel([x, y, 0.5 * self.height], self.height, self.radius, PERSON_LABEL)


@dataclass
class World:
    objects: List[LandmarkModel]
    ground: GroundPlane = Z_UP_GROUND
    feature_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    feature_owner: Optional[np.ndarray] = None
    persons: List[PersonTrack] = field(default_factory=list)

    def __post_init__(self):
        self.feature_points = np.asarray(self.feature_points, dtype=float).reshape(-1, 3)
        if self.feature_owner is None:
            self.feature_owner = np.full(len(self.feature_points), -1, dtype=int)
        for k, obj in enumerate(self.objects):
            if abs(obj.center[2] - 0.5 * obj.height) > 1e-9:
                raise ValueError(f"object {k} is not grounded")


@dataclass(frozen=True)
class Detection:
    bbox: BBox2D
    label: str
    score: float
    gt_id: int = -1


@dataclass(frozen=True, eq=False)
class LineSegment:
    p0: np.ndarray
    p1: np.ndarray

    @property
    def length(self):
        return float(np.linalg.norm(np.asarray(self.p1) - np.asarray(self.p0)))


@dataclass(frozen=True, eq=False)
class FeatureObservation:
    track_id: int
    point_id: int
    pixel: np.ndarray


@dataclass(frozen=True, eq=False)
class Frame:
    index: int
    detections: List[Detection]
    feature_obs: List[FeatureObservation]
    line_obs: List[LineSegment]
    odom: Pose
    ground_points: np.ndarray
    timestamp: float = 0.0


def tracks_in_box(frame: Frame, box: BBox2D) -> frozenset:
    """Track ids of the frame's feature observations inside ``box``."""
    if not frame.feature_obs:
        return frozenset()
    px = np.array([o.pixel for o in frame.feature_obs])
    ids = np.array([o.track_id for o in frame.feature_obs])
    inside = (px[:, 0] >= box.x_min) & (px[:, 0] <= box.x_max) & (px[:, 1] >= box.y_min) & (px[:, 1] <= box.y_max)
    return frozenset(int(t) for t in ids[inside])


@dataclass
class SimulatedSequence:
    frames: List[Frame]
    ground_truth: List[Pose]
    intr: CameraIntrinsics
    world: World
    noise: NoiseConfig
    dt: float = 0.1

    @property
    def timestamps(self):
        return [f.timestamp for f in self.frames]


def _visible(world_from_cam: Pose, intr: CameraIntrinsics, point_w):
    pc = world_from_cam.inverse().apply(point_w)
    if not VISIBLE_DEPTH[0] <= pc[2] <= VISIBLE_DEPTH[1]:
        return False
    return intr.contains(project_points(intr, pc))


def _noisy_segment(a, b, rng, sigma):
    if sigma > 0:
        a = a + rng.normal(0.0, sigma, 2)
        b = b + rng.normal(0.0, sigma, 2)
    return LineSegment(np.asarray(a, float), np.asarray(b, float))


def _model_lines(model: LandmarkModel, cam_from_world: Pose, intr, rng, sigma):
    if isinstance(model, CylinderModel):
        c = model.center
        ends = np.array([[c[0], c[1], 0.0], [c[0], c[1], LEG_FRACTION * model.height]])
        pts = cam_from_world.apply(ends)
        if np.any(pts[:, 2] <= 0.05):
            return []
        px = project_points(intr, pts)
        return [_noisy_segment(px[0], px[1], rng, sigma)]
    corners = cam_from_world.apply(model.samples())
    if np.any(corners[:, 2] <= 0.05):
        return []
    px = project_points(intr, corners)
    out = []
    for i, j in CUBOID_EDGES:
        if intr.contains(px[i]) and intr.contains(px[j]):
            out.append(_noisy_segment(px[i], px[j], rng, sigma))
    return out


def _ground_points(world: World, cam_from_world: Pose, intr, noise: NoiseConfig, t, n=40):
    rng = keyed_rng(noise.seed, t, _GROUND_ENTITY, _S_GROUND)
    pts = []
    u = rng.uniform(0.05 * intr.width, 0.95 * intr.width, 4 * n)
    v = rng.uniform(0.6 * intr.height, 0.98 * intr.height, 4 * n)
    for uu, vv in zip(u, v):
        try:
            X = backproject_ground(intr, cam_from_world, (uu, vv))
        except GeometryError:
            continue
        pc = cam_from_world.apply(X)
        if pc[2] > 8.0:
            continue
        pts.append(pc)
        if len(pts) == n:
            break
    pts = np.array(pts).reshape(-1, 3)
    if noise.depth_sigma > 0 and len(pts):
        pts = pts + rng.normal(0.0, noise.depth_sigma, pts.shape)
    return pts


def simulate_frame(world: World, cam_pose: Pose, intr: CameraIntrinsics, noise: NoiseConfig, t: int, timestamp=0.0) -> Frame:
    """Observations of ``world`` from camera pose ``cam_pose`` (world_from_cam).

    ``odom`` is left as identity; :func:`simulate_trajectory` fills it in.
    """
    cam_from_world = cam_pose.inverse()
    detections = []
    lines = []
    entities = [(k, obj) for k, obj in enumerate(world.objects)]
    entities += [(_PERSON_BASE + k, p.model_at(timestamp)) for k, p in enumerate(world.persons)]
    for ent, model in entities:
        if not _visible(cam_pose, intr, model.center):
            continue
        if keyed_rng(noise.seed, t, ent, _S_DETECT).uniform() >= noise.detect_prob:
            continue
        try:
            proj = project_model_bbox(model, cam_from_world, intr)
        except GeometryError:
            continue
        box = proj.bbox.as_array()
        if noise.bbox_sigma > 0:
            box = clamp_box(box + keyed_rng(noise.seed, t, ent, _S_BBOX).normal(0.0, noise.bbox_sigma, 4), intr)
            if box[0] >= box[2] or box[1] >= box[3]:
                continue
        score = float(keyed_rng(noise.seed, t, ent, _S_SCORE).uniform(0.6, 1.0))
        is_person = ent >= _PERSON_BASE
        detections.append(Detection(BBox2D.from_array(box), model.label, score, -1 if is_person else ent))
        if not is_person:
            lines += _model_lines(model, cam_from_world, intr, keyed_rng(noise.seed, t, ent, _S_LINE), noise.bbox_sigma)

    feats = []
    if len(world.feature_points):
        pc = cam_from_world.apply(world.feature_points)
        ok = (pc[:, 2] >= VISIBLE_DEPTH[0]) & (pc[:, 2] <= VISIBLE_DEPTH[1])
        px = project_points(intr, np.where(ok[:, None], pc, 1.0))
        ok &= (px[:, 0] >= 0) & (px[:, 0] <= intr.width) & (px[:, 1] >= 0) & (px[:, 1] <= intr.height)
        if noise.pixel_sigma > 0:
            # one row per world point, so a point's noise does not depend on
            # which other points happen to be visible
            px = px + keyed_rng(noise.seed, t, _FEATURE_NOISE_ENTITY, _S_PIXEL).normal(0.0, noise.pixel_sigma, px.shape)
        feats = [FeatureObservation(int(n), int(n), px[n]) for n in np.flatnonzero(ok)]

    ground = _ground_points(world, cam_from_world, intr, noise, t)
    return Frame(t, detections, feats, lines, Pose.identity(), ground, float(timestamp))


def noisy_increment(true_inc: Pose, noise: NoiseConfig, t: int) -> Pose:
    rng = keyed_rng(noise.seed, t, 0, _S_ODOM)
    xi = np.concatenate(
        [rng.normal(0.0, 1.0, 3) * noise.odom_trans_sigma, rng.normal(0.0, 1.0, 3) * noise.odom_rot_sigma]
    )
    if not np.any(xi):
        return true_inc
    return true_inc.compose(Pose.exp(xi))


def simulate_trajectory(world: World, script: Sequence[Pose], intr: CameraIntrinsics, noise: NoiseConfig, dt=0.1) -> SimulatedSequence:
    """Frames for each scripted camera pose plus noisy odometry increments.

    Feature track ids are re-issued whenever a point re-enters the view after
    a gap, as a frame-to-frame tracker would.
    """
    if len(script) < 2:
        raise ValueError("trajectory script needs at least 2 poses")
    frames = []
    next_track = 0
    active = {}
    for t, pose in enumerate(script):
        f = simulate_frame(world, pose, intr, noise, t, timestamp=t * dt)
        seen = {}
        obs = []
        for o in f.feature_obs:
            tid = active.get(o.point_id)
            if tid is None:
                tid = next_track
                next_track += 1
            seen[o.point_id] = tid
            obs.append(FeatureObservation(tid, o.point_id, o.pixel))
        active = seen
        odom = Pose.identity() if t == 0 else noisy_increment(script[t - 1].inverse() @ pose, noise, t)
        frames.append(replace(f, feature_obs=obs, odom=odom))
    return SimulatedSequence(frames, list(script), intr, world, noise, dt)


def chain_odometry(first: Pose, frames: Sequence[Frame]) -> List[Pose]:
    poses = [first]
    for f in frames[1:]:
        poses.append(poses[-1] @ f.odom)
    return poses


# -- serialisation -----------------------------------------------------------


def _pose_dict(p: Pose):
    return {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}


def frame_to_dict(f: Frame):
    return {
        "index": f.index,
        "timestamp": f.timestamp,
        "detections": [
            {"bbox": list(d.bbox.as_tuple()), "label": d.label, "score": d.score, "gt_id": d.gt_id}
            for d in f.detections
        ],
        "features": [[o.track_id, o.point_id, float(o.pixel[0]), float(o.pixel[1])] for o in f.feature_obs],
        "lines": [[*map(float, s.p0), *map(float, s.p1)] for s in f.line_obs],
        "odom": _pose_dict(f.odom),
        "ground_points": f.ground_points.tolist(),
    }


def frame_from_dict(d) -> Frame:
    return Frame(
        index=int(d["index"]),
        detections=[
            Detection(BBox2D(*x["bbox"]), x["label"], float(x["score"]), int(x["gt_id"]))
            for x in d["detections"]
        ],
        feature_obs=[FeatureObservation(int(a), int(b), np.array([u, v])) for a, b, u, v in d["features"]],
        line_obs=[LineSegment(np.array(s[:2]), np.array(s[2:])) for s in d["lines"]],
        odom=Pose(d["odom"]["rotation"], d["odom"]["translation"]),
        ground_points=np.array(d["ground_points"], dtype=float).reshape(-1, 3),
        timestamp=float(d["timestamp"]),
    )


def dump_frames(frames, path):
    with open(path, "w") as fh:
        json.dump({"schema_version": 1, "frames": [frame_to_dict(f) for f in frames]}, fh, sort_keys=True)
        fh.write("\n")


def load_frames(path):
    with open(path) as fh:
        doc = json.load(fh)
    return [frame_from_dict(d) for d in doc["frames"]]
