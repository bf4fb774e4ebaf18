"""End-to-end object SLAM: ground plane, proposals, CRF selection,
association and joint optimisation alternated by coordinate descent."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator

from .association import (
    DEFAULT_SIGMA,
    DEFAULT_TAU,
    LandmarkRegistry,
    association_weights,
    assign_or_create,
    feature_point_association,
    feature_prior,
    semantic_prior,
)
from .crf import DEFAULT_WINDOW, beta, build_window, encode_sequence, select
from .geometry import BBox2D, CameraIntrinsics, GroundPlane, Pose
from .graph import FactorGraph, OptimizationResult, SolverConfig
from .proposals import (
    DEFAULT_DATABASE,
    DegenerateInput,
    ObjectDatabase,
    Proposal3D,
    frame_proposals,
    ground_plane_estimate,
)
from .world_sim import Frame, SimulatedSequence, tracks_in_box

MIN_PARALLAX = np.radians(1.0)


@dataclass
class Measurement:
    """A CRF-selected 3D proposal together with the detection it explains."""

    frame: int
    det: int
    label: str
    bbox: BBox2D
    score: float
    proposal: Proposal3D
    tracks: frozenset
    semantic: float
    gt_id: int = -1

    @property
    def feature_count(self):
        return len(self.tracks)


@dataclass
class SlamProblem:
    frames: List[Frame]
    intr: CameraIntrinsics
    poses: List[Pose]
    measurements: List[Measurement] = field(default_factory=list)
    registry: LandmarkRegistry = field(default_factory=LandmarkRegistry)
    associations: List[Optional[int]] = field(default_factory=list)
    points: Dict[int, np.ndarray] = field(default_factory=dict)
    tracks: Dict[int, List[Tuple[int, np.ndarray]]] = field(default_factory=dict)
    planes: List[Optional[GroundPlane]] = field(default_factory=list)
    bindings: Dict[int, int] = field(default_factory=dict)


@dataclass
class GraphWeights:
    pixel_sigma: float = 1.0
    bbox_sigma: float = 2.0
    odom_rot_sigma: float = 0.005
    odom_trans_sigma: float = 0.01
    ground_normal_sigma: float = 0.01
    ground_offset_sigma: float = 0.01
    point_landmark_sigma: float = 0.05
    truncation_sharpness: Optional[float] = None
    use_landmarks: bool = True
    tau: float = DEFAULT_TAU
    sigma: float = DEFAULT_SIGMA
    feature_tolerance: float = 0.1


@dataclass
class CoordinateDescentResult:
    poses: List[Pose]
    registry: LandmarkRegistry
    rounds: int
    optimizations: List[OptimizationResult]


# -- odometry ------------------------------------------------------------------


def dead_reckoning(first: Pose, frames: Sequence[Frame]) -> List[Pose]:
    """Chain odometry increments. A frame without odometry reuses the previous
    increment (constant velocity); the very first missing one is identity."""
    poses = [first]
    inc = Pose.identity()
    for f in frames[1:]:
        if f.odom is not None:
            inc = f.odom
        poses.append(poses[-1] @ inc)
    return poses


def odometry_increments(frames: Sequence[Frame]) -> List[Pose]:
    out = []
    inc = Pose.identity()
    for f in frames[1:]:
        if f.odom is not None:
            inc = f.odom
        out.append(inc)
    return out


# -- feature points --------------------------------------------------------------


def collect_tracks(frames: Sequence[Frame]) -> Dict[int, List[Tuple[int, np.ndarray]]]:
    tracks: Dict[int, List[Tuple[int, np.ndarray]]] = {}
    for k, f in enumerate(frames):
        for o in f.feature_obs:
            tracks.setdefault(o.track_id, []).append((k, np.asarray(o.pixel, float)))
    return tracks


def triangulate(observations, poses: Sequence[Pose], intr: CameraIntrinsics, max_rms=5.0):
    """Multi-view DLT for one track. Returns ``None`` for degenerate or
    implausible tracks."""
    return triangulate_tracks({0: list(observations)}, poses, intr, max_rms).get(0)


def triangulate_tracks(tracks, poses: Sequence[Pose], intr: CameraIntrinsics, max_rms=5.0) -> Dict[int, np.ndarray]:
    """DLT for many tracks at once.

    The homogeneous point is the smallest eigenvector of ``A^T A`` where ``A``
    stacks two rows per observation. Tracks with fewer than two views, less
    than one degree of parallax, a point behind a camera or a large
    reprojection RMS are dropped.
    """
    ids = [tr for tr in sorted(tracks) if len(tracks[tr]) >= 2]
    if not ids:
        return {}
    owner = np.concatenate([np.full(len(tracks[tr]), k) for k, tr in enumerate(ids)])
    frame = np.array([k for tr in ids for k, _ in tracks[tr]])
    px = np.array([p for tr in ids for _, p in tracks[tr]], dtype=float)
    R = np.array([p.rotation for p in poses])[frame]
    t = np.array([p.translation for p in poses])[frame]
    Rt = np.swapaxes(R, 1, 2)
    P = intr.K @ np.concatenate([Rt, -np.einsum("kij,kj->ki", Rt, t)[:, :, None]], axis=2)
    a1 = px[:, 0, None] * P[:, 2] - P[:, 0]
    a2 = px[:, 1, None] * P[:, 2] - P[:, 1]
    M = np.zeros((len(ids), 4, 4))
    np.add.at(M, owner, np.einsum("ki,kj->kij", a1, a1) + np.einsum("ki,kj->kij", a2, a2))
    _, vecs = np.linalg.eigh(M)
    Xh = vecs[:, :, 0]
    ok = np.abs(Xh[:, 3]) > 1e-12
    X = Xh[:, :3] / np.where(ok, Xh[:, 3], 1.0)[:, None]
    # parallax: angle between the extreme rays of each track
    rays = np.einsum("kij,kj->ki", R, np.column_stack([px, np.ones(len(px))]) @ intr.K_inv.T)
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    pc = np.einsum("kji,kj->ki", R, X[owner] - t)
    depth_ok = np.ones(len(ids), dtype=bool)
    np.logical_and.at(depth_ok, owner, pc[:, 2] > 0.1)
    zs = np.where(pc[:, 2] > 0.1, pc[:, 2], 1.0)
    proj = (pc @ intr.K.T)[:, :2] / zs[:, None]
    sq = np.sum((proj - px) ** 2, axis=1)
    sse = np.zeros(len(ids))
    np.add.at(sse, owner, sq)
    counts = np.bincount(owner, minlength=len(ids))
    rms = np.sqrt(sse / counts)
    out = {}
    start = 0
    for k, tr in enumerate(ids):
        n = counts[k]
        if ok[k] and depth_ok[k] and rms[k] <= max_rms:
            rr = rays[start:start + n]
            if np.arccos(np.clip(np.min(rr @ rr.T), -1.0, 1.0)) >= MIN_PARALLAX:
                out[tr] = X[k]
        start += n
    return out


# -- association -------------------------------------------------------------------


def initial_association(problem: SlamProblem, weights: GraphWeights):
    """Sequential assign-or-create over the measurements in frame order;
    landmark estimates are running means of their associated proposals."""
    reg = LandmarkRegistry()
    assoc = []
    for m in problem.measurements:
        pose = problem.poses[m.frame]
        res = assign_or_create(m.proposal, reg, pose, feature_prior(m.feature_count), m.semantic, weights.tau, weights.sigma, m.frame)
        if not res.created:
            reg.observe(res.landmark_id, m.proposal.in_frame(pose))
        assoc.append(res.landmark_id)
    problem.registry = reg
    problem.associations = assoc


def reassociate(problem: SlamProblem, weights: GraphWeights) -> List[Optional[int]]:
    """Association with fixed estimates: no creation; a measurement whose best
    weight drops below the threshold keeps its current landmark."""
    out = []
    for m, cur in zip(problem.measurements, problem.associations):
        aw = association_weights(m.proposal, problem.registry, problem.poses[m.frame], feature_prior(m.feature_count), m.semantic, weights.sigma)
        out.append(aw.argmax() if aw.ids and aw.max_unnormalized >= weights.tau else cur)
    return out


def bind_points(problem: SlamProblem, weights: GraphWeights) -> Dict[int, int]:
    """Feature points inside a detection whose measurement maps to landmark j,
    and within j's volume, are bound to j."""
    candidates: Dict[int, Dict[int, int]] = {}
    for m, lid in zip(problem.measurements, problem.associations):
        if lid is None:
            continue
        for tr in m.tracks:
            if tr in problem.points:
                c = candidates.setdefault(tr, {})
                c[lid] = c.get(lid, 0) + 1
    out = {}
    for tr in sorted(candidates):
        votes = candidates[tr]
        lid = max(sorted(votes), key=lambda j: votes[j])
        label = problem.registry.get(lid).label
        if feature_point_association(problem.points[tr], lid, label, problem.registry, weights.feature_tolerance) is not None:
            out[tr] = lid
    return out


def _prune(problem: SlamProblem):
    """Drop landmarks no measurement refers to; refresh observation counts."""
    counts: Dict[int, int] = {}
    for lid in problem.associations:
        if lid is not None:
            counts[lid] = counts.get(lid, 0) + 1
    keep = [lm for lm in problem.registry if lm.id in counts]
    for lm in keep:
        lm.observations = counts[lm.id]
    problem.registry.landmarks = keep


# -- graph ---------------------------------------------------------------------------


def _observation_pairs(obs):
    """Disjoint consecutive pairs so every observation enters the cost once;
    an odd one out is paired with its predecessor."""
    pairs = [(obs[k], obs[k + 1]) for k in range(0, len(obs) - 1, 2)]
    if len(obs) % 2 and len(obs) > 1:
        pairs.append((obs[-2], obs[-1]))
    return pairs


def build_graph(problem: SlamProblem, weights: GraphWeights) -> FactorGraph:
    g = FactorGraph(problem.intr, weights.pixel_sigma)
    for k, pose in enumerate(problem.poses):
        g.add_pose(k, pose, fixed=(k == 0))
    for k, u in enumerate(odometry_increments(problem.frames)):
        g.add_odometry(k, k + 1, u, weights.odom_rot_sigma, weights.odom_trans_sigma)
    for tr in sorted(problem.points):
        g.add_point(tr, problem.points[tr])
        for (a, pa), (b, pb) in _observation_pairs(problem.tracks[tr]):
            g.add_reprojection(tr, a, b, pa, pb)
    for k, plane in enumerate(problem.planes):
        if plane is not None and k > 0:
            g.add_ground_plane(k, plane, weights.ground_normal_sigma, weights.ground_offset_sigma)
    if weights.use_landmarks:
        for lm in problem.registry:
            g.add_landmark(lm.id, lm.model)
        for m, lid in zip(problem.measurements, problem.associations):
            if lid is not None:
                g.add_bbox(lid, m.frame, m.bbox, m.score, weights.bbox_sigma)
        for tr in sorted(problem.bindings):
            g.add_point_landmark(tr, problem.bindings[tr], weights.point_landmark_sigma, weights.truncation_sharpness)
    return g


def _pull(problem: SlamProblem, g: FactorGraph):
    problem.poses = [g.poses[k] for k in range(len(problem.poses))]
    for tr in problem.points:
        problem.points[tr] = g.points[tr]
    for lm in problem.registry:
        if lm.id in g.landmarks:
            lm.model = g.landmarks[lm.id]


def coordinate_descent(problem: SlamProblem, weights: GraphWeights, rounds: int = 10, solver: Optional[SolverConfig] = None) -> CoordinateDescentResult:
    """Alternate association with fixed estimates and optimisation with fixed
    associations until the associations stop changing or ``rounds`` is hit."""
    results = []
    done = 0
    previous = None
    for _ in range(rounds):
        problem.associations = reassociate(problem, weights)
        if previous is not None and problem.associations == previous:
            break
        _prune(problem)
        problem.bindings = bind_points(problem, weights) if weights.use_landmarks else {}
        g = build_graph(problem, weights)
        results.append(g.optimize(solver))
        _pull(problem, g)
        previous = list(problem.associations)
        done += 1
    return CoordinateDescentResult(problem.poses, problem.registry, done, results)


# -- estimator --------------------------------------------------------------------------


class SemanticSLAM(BaseEstimator):
    """Object-level SLAM estimator over a simulated (or recorded) frame sequence.

    ``fit`` takes a :class:`SimulatedSequence` or a list of frames (with
    ``intr``). The first pose is anchored at ``initial_pose`` (defaults to
    the sequence's first ground-truth pose, else identity).
    """

    def __init__(
        self,
        database: Optional[ObjectDatabase] = None,
        window: int = DEFAULT_WINDOW,
        tau: float = DEFAULT_TAU,
        sigma: float = DEFAULT_SIGMA,
        rounds: int = 10,
        use_landmarks: bool = True,
        pixel_sigma: float = 1.0,
        bbox_sigma: float = 2.0,
        odom_rot_sigma: float = 0.005,
        odom_trans_sigma: float = 0.01,
        ground_normal_sigma: float = 0.01,
        ground_offset_sigma: float = 0.01,
        point_landmark_sigma: float = 0.05,
        truncation_sharpness: Optional[float] = None,
        feature_tolerance: float = 0.1,
        yaw_samples: int = 36,
        ransac_threshold: float = 0.02,
        triangulation_max_rms: float = 50.0,
        max_iterations: int = 50,
        huber_delta: float = 5.0,
        random_state: int = 0,
    ):
        self.database = database
        self.window = window
        self.tau = tau
        self.sigma = sigma
        self.rounds = rounds
        self.use_landmarks = use_landmarks
        self.pixel_sigma = pixel_sigma
        self.bbox_sigma = bbox_sigma
        self.odom_rot_sigma = odom_rot_sigma
        self.odom_trans_sigma = odom_trans_sigma
        self.ground_normal_sigma = ground_normal_sigma
        self.ground_offset_sigma = ground_offset_sigma
        self.point_landmark_sigma = point_landmark_sigma
        self.truncation_sharpness = truncation_sharpness
        self.feature_tolerance = feature_tolerance
        self.yaw_samples = yaw_samples
        self.ransac_threshold = ransac_threshold
        self.triangulation_max_rms = triangulation_max_rms
        self.max_iterations = max_iterations
        self.huber_delta = huber_delta
        self.random_state = random_state

    def _weights(self):
        return GraphWeights(
            self.pixel_sigma, self.bbox_sigma, self.odom_rot_sigma, self.odom_trans_sigma,
            self.ground_normal_sigma, self.ground_offset_sigma, self.point_landmark_sigma,
            self.truncation_sharpness, self.use_landmarks, self.tau, self.sigma, self.feature_tolerance,
        )

    def fit(self, X, y=None, intr: Optional[CameraIntrinsics] = None, initial_pose: Optional[Pose] = None):
        if isinstance(X, SimulatedSequence):
            frames, intr = X.frames, X.intr
            if initial_pose is None:
                initial_pose = X.ground_truth[0]
        else:
            frames = list(X)
        if intr is None:
            raise ValueError("camera intrinsics are required")
        if len(frames) < 1:
            raise ValueError("at least one frame is required")
        db = self.database if self.database is not None else DEFAULT_DATABASE
        weights = self._weights()
        timings = {}
        clock = time.perf_counter()

        def lap(name):
            nonlocal clock
            now = time.perf_counter()
            timings[name] = 1000.0 * (now - clock)
            clock = now

        planes: List[Optional[GroundPlane]] = []
        for f in frames:
            try:
                plane, _ = ground_plane_estimate(f.ground_points, self.ransac_threshold, seed=self.random_state)
            except DegenerateInput:
                plane = None
            planes.append(plane)
        lap("ground_plane")

        # without landmark factors the selected proposals would go unused
        props = [
            frame_proposals(f, plane, intr, db, self.yaw_samples) if plane is not None and self.use_landmarks else {}
            for f, plane in zip(frames, planes)
        ]
        lap("proposals")

        poses = dead_reckoning(initial_pose if initial_pose is not None else Pose.identity(), frames)
        problem = SlamProblem(list(frames), intr, poses, planes=planes)
        seqs = [encode_sequence(f) for f in frames]
        for start in range(0, len(frames), self.window):
            stop = min(start + self.window, len(frames))
            win = build_window(frames[start:stop], props[start:stop], poses[start:stop], intr)
            assignment, _ = select(win)
            for k, (cf, choices) in enumerate(zip(win.frames, assignment.choices)):
                t = start + k
                sem = 1.0 if t == 0 else semantic_prior(beta(seqs[t - 1], seqs[t]))
                for obj, c in zip(cf.objects, choices):
                    if c is None:
                        continue
                    det = frames[t].detections[obj.det_index]
                    problem.measurements.append(
                        Measurement(t, obj.det_index, det.label, det.bbox, det.score, obj.proposals[c],
                                    tracks_in_box(frames[t], det.bbox), sem, det.gt_id)
                    )
        lap("crf")

        problem.tracks = collect_tracks(frames)
        problem.points = triangulate_tracks(problem.tracks, poses, intr, self.triangulation_max_rms)
        lap("triangulation")

        initial_association(problem, weights)
        lap("association")

        solver = SolverConfig(max_iterations=self.max_iterations, huber_delta=self.huber_delta)
        result = coordinate_descent(problem, weights, self.rounds, solver)
        lap("optimization")

        self.problem_ = problem
        self.trajectory_ = list(problem.poses)
        self.registry_ = problem.registry
        self.n_rounds_ = result.rounds
        self.optimizations_ = result.optimizations
        self.timings_ = timings
        self.dead_reckoning_ = poses
        return self

    def predict(self, X=None):
        """Estimated ``world_from_cam`` trajectory of the fitted sequence."""
        return list(self.trajectory_)

    def score(self, X, y=None):
        """Negative ATE RMSE against ``y`` (or ``X.ground_truth``)."""
        from .evaluation import ate_rmse

        gt = y if y is not None else X.ground_truth
        return -ate_rmse(self.trajectory_, gt)
