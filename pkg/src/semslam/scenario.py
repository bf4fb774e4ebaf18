"""Scenario configuration, trajectory files and the end-to-end runner."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .evaluation import align_trajectories, association_precision_recall, ate_rmse, landmark_errors
from .geometry import CameraIntrinsics, CylinderModel, Pose
from .proposals import DEFAULT_DATABASE, ObjectDatabase
from .slam import SemanticSLAM
from .world_sim import (
    NoiseConfig,
    PersonTrack,
    SimulatedSequence,
    World,
    chain_odometry,
    dump_frames,
    keyed_rng,
    simulate_trajectory,
)

SCHEMA_VERSION = 1
_FEATURE_ENTITY = 3_000_000


class ConfigError(ValueError):
    """Invalid scenario configuration; ``location`` names the offending field."""

    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


# -- TUM trajectory files ----------------------------------------------------------


def _fixed(v):
    text = "%.9f" % v
    return text[1:] if text == "-0.000000000" else text


def format_tum(timestamps, poses) -> str:
    lines = []
    for ts, p in zip(timestamps, poses):
        q = Rotation.from_matrix(p.rotation).as_quat()  # x, y, z, w
        # q and -q are the same rotation: make the first clearly non-zero
        # component of (w, x, y, z) positive so re-reading is stable
        lead = next((q[i] for i in (3, 0, 1, 2) if abs(q[i]) > 1e-6), 1.0)
        if lead < 0:
            q = -q
        vals = [ts, *p.translation, *q]
        lines.append(" ".join(_fixed(v) for v in vals))
    return "\n".join(lines) + ("\n" if lines else "")


def write_tum(path, timestamps, poses):
    with open(path, "w") as fh:
        fh.write(format_tum(timestamps, poses))


def read_tum(path):
    """Return ``(timestamps, poses)``; ``#`` comment lines are skipped."""
    ts, poses = [], []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{n}: expected 8 fields, got {len(parts)}")
            v = [float(x) for x in parts]
            ts.append(v[0])
            poses.append(Pose(Rotation.from_quat(v[4:8]).as_matrix(), np.array(v[1:4])))
    return ts, poses


# -- configuration -----------------------------------------------------------------------


@dataclass
class ScenarioConfig:
    seed: int
    camera: CameraIntrinsics
    database: ObjectDatabase
    objects: List[Dict[str, Any]]
    persons: List[PersonTrack]
    features: Dict[str, Any]
    trajectory: Dict[str, Any]
    noise: NoiseConfig
    solver: Dict[str, Any] = field(default_factory=dict)
    crf_window: int = 5
    association: Dict[str, float] = field(default_factory=dict)
    pipeline: Dict[str, Any] = field(default_factory=dict)
    output: Optional[str] = None
    raw: Dict[str, Any] = field(default_factory=dict)


def _get(d, key, loc, kind=None, default=...):
    if not isinstance(d, dict):
        raise ConfigError(loc, "expected an object")
    if key not in d:
        if default is ...:
            raise ConfigError(f"{loc}.{key}" if loc else key, "missing required field")
        return default
    v = d[key]
    where = f"{loc}.{key}" if loc else key
    if kind is not None and not isinstance(v, kind) or isinstance(v, bool) and kind in (int, float, (int, float)):
        raise ConfigError(where, f"expected {getattr(kind, '__name__', 'number')}, got {type(v).__name__}")
    return v


def _vec(v, n, loc):
    if not isinstance(v, list) or len(v) != n or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise ConfigError(loc, f"expected a list of {n} numbers")
    return [float(x) for x in v]


_NUM = (int, float)

_SOLVER_KEYS = {"max_iterations": int, "huber_delta": _NUM}
_ASSOC_KEYS = {"sigma": _NUM, "tau": _NUM}
_PIPELINE_KEYS = {
    "rounds": int,
    "pixel_sigma": _NUM,
    "bbox_sigma": _NUM,
    "odom_rot_sigma": _NUM,
    "odom_trans_sigma": _NUM,
    "ground_normal_sigma": _NUM,
    "ground_offset_sigma": _NUM,
    "point_landmark_sigma": _NUM,
    "feature_tolerance": _NUM,
    "yaw_samples": int,
}


def _section(d, name, keys):
    sec = _get(d, name, "", dict, {})
    out = {}
    for k, v in sec.items():
        if k not in keys:
            raise ConfigError(f"{name}.{k}", "unknown field")
        out[k] = _get(sec, k, name, keys[k])
        if out[k] < 0:
            raise ConfigError(f"{name}.{k}", "must be non-negative")
    return out


def parse_config(doc: Dict[str, Any], base_dir: Optional[str] = None) -> ScenarioConfig:
    """Validate a scenario document, reporting the first bad field."""
    if not isinstance(doc, dict):
        raise ConfigError("", "configuration must be a JSON object")
    version = _get(doc, "schema_version", "", int)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version}")
    seed = _get(doc, "seed", "", int, 0)
    if seed < 0:
        raise ConfigError("seed", "must be non-negative")

    cam = _get(doc, "camera", "", dict)
    try:
        intr = CameraIntrinsics(
            float(_get(cam, "fx", "camera", _NUM)), float(_get(cam, "fy", "camera", _NUM)),
            float(_get(cam, "cx", "camera", _NUM)), float(_get(cam, "cy", "camera", _NUM)),
            int(_get(cam, "width", "camera", int)), int(_get(cam, "height", "camera", int)),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("camera", str(exc)) from None

    db_spec = _get(doc, "database", "", (str, dict), None)
    try:
        if db_spec is None:
            db = DEFAULT_DATABASE
        elif isinstance(db_spec, dict):
            db = ObjectDatabase.from_dict(db_spec)
        else:
            path = db_spec if os.path.isabs(db_spec) or base_dir is None else os.path.join(base_dir, db_spec)
            db = ObjectDatabase.load(path)
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError("database", f"cannot load object database ({exc})") from None

    world = _get(doc, "world", "", dict)
    objects = []
    for k, o in enumerate(_get(world, "objects", "world", list)):
        loc = f"world.objects[{k}]"
        label = _get(o, "label", loc, str)
        if label not in db:
            raise ConfigError(f"{loc}.label", f"class {label!r} is not in the object database")
        pos = _vec(_get(o, "position", loc), 2, f"{loc}.position")
        yaw = float(_get(o, "yaw", loc, _NUM, 0.0))
        objects.append({"label": label, "position": pos, "yaw": yaw})
    persons = []
    for k, p in enumerate(_get(world, "persons", "world", list, [])):
        loc = f"world.persons[{k}]"
        persons.append(PersonTrack(tuple(_vec(_get(p, "start", loc), 2, f"{loc}.start")),
                                   tuple(_vec(_get(p, "velocity", loc, list, [0, 0]), 2, f"{loc}.velocity"))))
    feats = _get(world, "features", "world", dict, {})
    features = {
        "per_object": _get(feats, "per_object", "world.features", int, 60),
        "background": _get(feats, "background", "world.features", int, 200),
        "room": _vec(_get(feats, "room", "world.features", list, [-6.0, -6.0, 6.0, 6.0]), 4, "world.features.room"),
        "wall_height": float(_get(feats, "wall_height", "world.features", _NUM, 2.5)),
    }
    if features["per_object"] < 0 or features["background"] < 0:
        raise ConfigError("world.features", "feature counts must be non-negative")

    traj = _get(doc, "trajectory", "", dict)
    kind = _get(traj, "type", "trajectory", str)
    if kind != "loop":
        raise ConfigError("trajectory.type", f"unsupported trajectory type {kind!r}")
    trajectory = {
        "type": kind,
        "frames": _get(traj, "frames", "trajectory", int),
        "center": _vec(_get(traj, "center", "trajectory", list, [0.0, 0.0]), 2, "trajectory.center"),
        "radii": _vec(_get(traj, "radii", "trajectory", list), 2, "trajectory.radii"),
        "height": float(_get(traj, "height", "trajectory", _NUM, 1.0)),
        "pitch_deg": float(_get(traj, "pitch_deg", "trajectory", _NUM, 10.0)),
        "inward_deg": float(_get(traj, "inward_deg", "trajectory", _NUM, 90.0)),
        "laps": float(_get(traj, "laps", "trajectory", _NUM, 1.0)),
        "dt": float(_get(traj, "dt", "trajectory", _NUM, 0.1)),
    }
    if trajectory["frames"] < 2:
        raise ConfigError("trajectory.frames", "need at least 2 frames")
    if min(trajectory["radii"]) <= 0:
        raise ConfigError("trajectory.radii", "radii must be positive")
    if trajectory["dt"] <= 0:
        raise ConfigError("trajectory.dt", "must be positive")

    noise_doc = _get(doc, "noise", "", dict, {})
    nkw = {}
    for k, v in noise_doc.items():
        if k not in NoiseConfig.__dataclass_fields__ or k == "seed":
            raise ConfigError(f"noise.{k}", "unknown field")
        nkw[k] = float(_get(noise_doc, k, "noise", _NUM))
    try:
        noise = NoiseConfig(seed=seed, **nkw)
    except ValueError as exc:
        raise ConfigError("noise", str(exc)) from None

    crf = _get(doc, "crf", "", dict, {})
    window = _get(crf, "window", "crf", int, 5)
    if window < 1:
        raise ConfigError("crf.window", "must be at least 1")

    return ScenarioConfig(
        seed=seed,
        camera=intr,
        database=db,
        objects=objects,
        persons=persons,
        features=features,
        trajectory=trajectory,
        noise=noise,
        solver=_section(doc, "solver", _SOLVER_KEYS),
        crf_window=window,
        association=_section(doc, "association", _ASSOC_KEYS),
        pipeline=_section(doc, "pipeline", _PIPELINE_KEYS),
        output=_get(doc, "output", "", str, None),
        raw=doc,
    )


def load_config(path=None, seed: Optional[int] = None) -> ScenarioConfig:
    """Load a scenario file (the packaged loop scenario when ``path`` is None)."""
    if path is None:
        ref = resources.files("semslam") / "data" / "loop_scenario.json"
        with resources.as_file(ref) as p:
            return load_config(str(p), seed)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from None
    if seed is not None:
        doc = dict(doc, seed=int(seed))
    return parse_config(doc, os.path.dirname(os.path.abspath(path)))


# -- world and trajectory ------------------------------------------------------------------


def build_world(cfg: ScenarioConfig) -> World:
    objects = []
    for o in cfg.objects:
        entry = cfg.database[o["label"]]
        c = [o["position"][0], o["position"][1], 0.5 * entry.height]
        objects.append(entry.make_model(c, o["yaw"], o["label"]))
    pts, owner = [], []
    for k, m in enumerate(objects):
        rng = keyed_rng(cfg.seed, 0, _FEATURE_ENTITY + k, 0)
        pts.append(_surface_points(m, cfg.features["per_object"], rng))
        owner += [k] * cfg.features["per_object"]
    rng = keyed_rng(cfg.seed, 0, _FEATURE_ENTITY - 1, 0)
    pts.append(_wall_points(cfg.features["room"], cfg.features["wall_height"], cfg.features["background"], rng))
    owner += [-1] * cfg.features["background"]
    return World(objects, feature_points=np.vstack(pts), feature_owner=np.array(owner, dtype=int), persons=list(cfg.persons))


def _surface_points(m, n, rng):
    """Points on the side surface of a model (what a camera would track)."""
    if isinstance(m, CylinderModel):
        a = rng.uniform(0.0, 2 * math.pi, n)
        z = rng.uniform(0.0, m.height, n)
        return np.column_stack([m.center[0] + m.radius * np.cos(a), m.center[1] + m.radius * np.sin(a), z])
    w, l, h = m.dims
    face = rng.integers(0, 4, n)
    s = rng.uniform(-0.5, 0.5, n)
    z = rng.uniform(0.0, h, n)
    local = np.zeros((n, 3))
    local[:, 0] = np.where(face < 2, np.where(face == 0, 0.5, -0.5) * w, s * w)
    local[:, 1] = np.where(face < 2, s * l, np.where(face == 2, 0.5, -0.5) * l)
    local[:, 2] = z - 0.5 * h
    return _yawed(local, m.yaw) + m.center


def _yawed(local, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return local @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T


def _wall_points(room, height, n, rng):
    x0, y0, x1, y1 = room
    perim = 2 * ((x1 - x0) + (y1 - y0))
    s = rng.uniform(0.0, perim, n)
    z = rng.uniform(0.1, height, n)
    out = np.zeros((n, 3))
    for k, d in enumerate(s):
        if d < x1 - x0:
            out[k, :2] = (x0 + d, y0)
        elif d < (x1 - x0) + (y1 - y0):
            out[k, :2] = (x1, y0 + d - (x1 - x0))
        elif d < 2 * (x1 - x0) + (y1 - y0):
            out[k, :2] = (x1 - (d - (x1 - x0) - (y1 - y0)), y1)
        else:
            out[k, :2] = (x0, y1 - (d - 2 * (x1 - x0) - (y1 - y0)))
    out[:, 2] = z
    return out


def camera_pose(position, heading, pitch) -> Pose:
    """``world_from_cam`` for a camera at ``position`` looking along world
    yaw ``heading``, tilted down by ``pitch`` (x right, y down, z forward)."""
    h = np.array([math.cos(heading), math.sin(heading), 0.0])
    f = math.cos(pitch) * h + np.array([0.0, 0.0, -math.sin(pitch)])
    r = np.array([h[1], -h[0], 0.0])
    d = np.cross(f, r)
    return Pose(np.column_stack([r, d, f]), np.asarray(position, float))


def loop_script(traj) -> List[Pose]:
    n = traj["frames"]
    cx, cy = traj["center"]
    a, b = traj["radii"]
    pitch = math.radians(traj["pitch_deg"])
    inward = math.radians(traj["inward_deg"])
    out = []
    for k in range(n):
        th = 2 * math.pi * traj["laps"] * k / n
        pos = [cx + a * math.cos(th), cy + b * math.sin(th), traj["height"]]
        tangent = math.atan2(b * math.cos(th), -a * math.sin(th))
        out.append(camera_pose(pos, tangent + inward, pitch))
    return out


def simulate_scenario(cfg: ScenarioConfig) -> SimulatedSequence:
    world = build_world(cfg)
    return simulate_trajectory(world, loop_script(cfg.trajectory), cfg.camera, cfg.noise, cfg.trajectory["dt"])


def make_estimator(cfg: ScenarioConfig, disable_landmarks=False) -> SemanticSLAM:
    return SemanticSLAM(
        database=cfg.database,
        window=cfg.crf_window,
        use_landmarks=not disable_landmarks,
        random_state=cfg.seed,
        **cfg.association,
        **cfg.solver,
        **cfg.pipeline,
    )


# -- runner --------------------------------------------------------------------------------


def _dump_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_scenario(cfg: ScenarioConfig, out_dir: Optional[str] = None, disable_landmarks=False) -> Dict[str, Any]:
    """Simulate, estimate and score one scenario; write artifacts to ``out_dir``.

    ``report.json`` only holds quantities that are a pure function of the
    configuration, so repeated runs give identical bytes; wall-clock
    timings go to ``timing.json``.
    """
    t0 = time.perf_counter()
    seq = simulate_scenario(cfg)
    t_sim = 1000.0 * (time.perf_counter() - t0)
    est = make_estimator(cfg, disable_landmarks).fit(seq)
    problem = est.problem_

    truth = {}
    for m, lid in zip(problem.measurements, problem.associations):
        if lid is not None:
            truth.setdefault(lid, []).append(m.gt_id)
    T = align_trajectories(est.trajectory_, seq.ground_truth)
    errs = landmark_errors(est.registry_, truth, seq.world.objects, T)
    precision, recall = association_precision_recall(problem.associations, [m.gt_id for m in problem.measurements])
    ate = ate_rmse(est.trajectory_, seq.ground_truth)
    ate_dr = ate_rmse(est.dead_reckoning_, seq.ground_truth)
    report = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "mode": "odometry_points_only" if disable_landmarks else "full",
        "frames": len(seq.frames),
        "ate_rmse": ate,
        "ate_rmse_dead_reckoning": ate_dr,
        "landmarks": errs,
        "association": {"precision": precision, "recall": recall, "measurements": len(problem.measurements)},
        "optimization": {
            "rounds": est.n_rounds_,
            "final_cost": est.optimizations_[-1].final_cost if est.optimizations_ else None,
            "cost_breakdown": est.optimizations_[-1].breakdown if est.optimizations_ else {},
        },
        "config": cfg.raw,
    }
    timing = {"simulation": t_sim, **est.timings_, "total": 1000.0 * (time.perf_counter() - t0)}
    out_dir = out_dir or cfg.output
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_tum(os.path.join(out_dir, "estimated.tum"), seq.timestamps, est.trajectory_)
        write_tum(os.path.join(out_dir, "groundtruth.tum"), seq.timestamps, seq.ground_truth)
        write_tum(os.path.join(out_dir, "dead_reckoning.tum"), seq.timestamps, est.dead_reckoning_)
        est.registry_.save(os.path.join(out_dir, "map.json"))
        _dump_json(os.path.join(out_dir, "report.json"), report)
        _dump_json(os.path.join(out_dir, "timing.json"), {k: round(v, 3) for k, v in timing.items()})
    return {"report": report, "timing": timing, "estimator": est, "sequence": seq}


def write_simulation(cfg: ScenarioConfig, out_dir: str) -> SimulatedSequence:
    seq = simulate_scenario(cfg)
    os.makedirs(out_dir, exist_ok=True)
    dump_frames(seq.frames, os.path.join(out_dir, "frames.json"))
    write_tum(os.path.join(out_dir, "groundtruth.tum"), seq.timestamps, seq.ground_truth)
    write_tum(os.path.join(out_dir, "odometry.tum"), seq.timestamps, chain_odometry(seq.ground_truth[0], seq.frames))
    _dump_json(os.path.join(out_dir, "world.json"), {
        "schema_version": SCHEMA_VERSION,
        "objects": [{"id": k, "label": o.label, "shape": o.shape, "center": o.center.tolist(), "yaw": float(o.yaw)}
                    for k, o in enumerate(seq.world.objects)],
        "camera": asdict(cfg.camera),
    })
    return seq

