"""Factor graph over camera poses, feature points and object landmarks,
solved by Levenberg-Marquardt on sparse normal equations."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial.transform import Rotation

from .factors import (
    TRUNCATION_SHARPNESS,
    bbox_batch,
    landmark_dof,
    odometry_batch,
    reprojection_batch,
    residual_ground_plane,
    residual_point_landmark,
)
from .geometry import (
    BBox2D,
    CameraIntrinsics,
    CylinderModel,
    cylinder_silhouette_offsets,
    GroundPlane,
    LandmarkModel,
    Pose,
)
from .lie import se3_exp

SIGMA_FLOOR = 1e-3


class SingularNormalEquations(RuntimeError):
    pass


class GraphError(ValueError):
    pass


@dataclass
class SolverConfig:
    max_iterations: int = 50
    relative_tolerance: float = 1e-6
    absolute_tolerance: float = 1e-18
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 3.0
    max_lambda: float = 1e12
    huber_delta: float = 5.0


@dataclass
class OdometryFactor:
    i: int
    j: int
    measurement: Pose
    sqrt_info: np.ndarray
    kind: str = "odometry"


@dataclass
class BBoxFactor:
    landmark: int
    pose: int
    observed: np.ndarray
    sqrt_info: float
    kind: str = "bbox"


@dataclass
class PointLandmarkFactor:
    point: int
    landmark: int
    sqrt_info: float
    sharpness: Optional[float] = TRUNCATION_SHARPNESS
    kind: str = "point_landmark"


@dataclass
class GroundPlaneFactor:
    pose: int
    reference: GroundPlane
    sqrt_info: np.ndarray
    kind: str = "ground_plane"


@dataclass
class ReprojectionFactor:
    point: int
    i: int
    j: int
    obs_i: np.ndarray
    obs_j: np.ndarray
    kind: str = "reprojection"


@dataclass
class OptimizationResult:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    breakdown: Dict[str, float]
    history: List[float] = field(default_factory=list)


def _solve(A, b, point_span=None):
    """Solve ``A x = b``; ``None`` when the system is singular.

    With feature points present their 3x3 diagonal blocks are eliminated
    first (Schur complement), leaving a small dense system over poses and
    landmarks. Points never couple to each other, so the block structure
    always holds.
    """
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", spla.MatrixRankWarning)
        try:
            if point_span is None:
                x = spla.spsolve(A.tocsc(), b)
                return x if np.all(np.isfinite(x)) else None
            p0, p1 = point_span
            A = A.tocsr()
            other = np.r_[0:p0, p1:A.shape[0]]
            App = A[p0:p1][:, p0:p1].tobsr(blocksize=(3, 3))
            m = (p1 - p0) // 3
            if len(App.indices) != m or np.any(App.indices != np.arange(m)):
                x = spla.spsolve(A.tocsc(), b)
                return x if np.all(np.isfinite(x)) else None
            Minv = np.linalg.inv(App.data)
            # each point sees many poses, so the coupling block is dense in practice
            Aop = A[other][:, p0:p1].toarray()
            Aoo = A[other][:, other].toarray()
            bo, bp = b[other], b[p0:p1]
            W = np.einsum("omi,mij->omj", Aop.reshape(len(other), m, 3), Minv).reshape(len(other), -1)
            S = Aoo - W @ Aop.T
            xo = np.linalg.solve(S, bo - W @ bp) if len(other) else np.zeros(0)
            xp = np.einsum("mij,mj->mi", Minv, (bp - Aop.T @ xo).reshape(m, 3)).ravel()
        except (RuntimeError, np.linalg.LinAlgError):
            return None
    x = np.empty(A.shape[0])
    x[other], x[p0:p1] = xo, xp
    return x if np.all(np.isfinite(x)) else None


class FactorGraph:
    """Variables are keyed by integer ids per family: poses, points and
    landmarks. Pose values are ``world_from_cam``."""

    def __init__(self, intr: CameraIntrinsics, pixel_sigma=1.0, huber_delta=5.0):
        self.intr = intr
        self.pixel_sigma = max(float(pixel_sigma), SIGMA_FLOOR)
        self.huber_delta = huber_delta
        self.poses: Dict[int, Pose] = {}
        self.points: Dict[int, np.ndarray] = {}
        self.landmarks: Dict[int, LandmarkModel] = {}
        self.fixed: set = set()
        self.factors: list = []
        self._groups = None
        self._static: dict = {}

    # -- construction ------------------------------------------------------
    def add_pose(self, key, pose: Pose, fixed=False):
        self.poses[key] = pose
        if fixed:
            self.fixed.add(key)

    def add_point(self, key, p):
        self.points[key] = np.asarray(p, dtype=float).copy()

    def add_landmark(self, key, model: LandmarkModel):
        self.landmarks[key] = model

    def _need(self, family, key):
        if key not in family:
            raise GraphError(f"factor references unknown variable {key!r}")

    def add_odometry(self, i, j, u: Pose, rot_sigma, trans_sigma):
        self._need(self.poses, i)
        self._need(self.poses, j)
        rs, ts = max(rot_sigma, SIGMA_FLOOR), max(trans_sigma, SIGMA_FLOOR)
        info = np.array([1 / ts] * 3 + [1 / rs] * 3)
        self.factors.append(OdometryFactor(i, j, u, info))

    def add_reprojection(self, point, i, j, obs_i, obs_j):
        self._need(self.points, point)
        self._need(self.poses, i)
        self._need(self.poses, j)
        self.factors.append(ReprojectionFactor(point, i, j, np.asarray(obs_i, float), np.asarray(obs_j, float)))

    def add_bbox(self, landmark, pose, observed, score=1.0, sigma=2.0):
        self._need(self.landmarks, landmark)
        self._need(self.poses, pose)
        obs = observed.as_array() if isinstance(observed, BBox2D) else np.asarray(observed, float)
        w = math.sqrt(max(score, 0.0)) / max(sigma, SIGMA_FLOOR)
        self.factors.append(BBoxFactor(landmark, pose, obs, w))

    def add_point_landmark(self, point, landmark, sigma=0.05, sharpness=TRUNCATION_SHARPNESS):
        self._need(self.points, point)
        self._need(self.landmarks, landmark)
        self.factors.append(PointLandmarkFactor(point, landmark, 1.0 / max(sigma, SIGMA_FLOOR), sharpness))

    def add_ground_plane(self, pose, reference: GroundPlane, normal_sigma=0.02, offset_sigma=0.02):
        self._need(self.poses, pose)
        info = np.array([1 / max(normal_sigma, SIGMA_FLOOR)] * 3 + [1 / max(offset_sigma, SIGMA_FLOOR)])
        self.factors.append(GroundPlaneFactor(pose, reference, info))

    # -- evaluation --------------------------------------------------------
    def _index(self):
        cols = {}
        n = 0
        for k in sorted(self.poses):
            if k not in self.fixed:
                cols[("x", k)] = n
                n += 6
        for k in sorted(self.points):
            cols[("p", k)] = n
            n += 3
        for k in sorted(self.landmarks):
            cols[("l", k)] = n
            n += landmark_dof(self.landmarks[k])
        return cols, n

    def _lookup(self, cols):
        """Per family, sorted keys and their first column (fixed poses absent)."""
        out = {}
        for fam in ("x", "p", "l"):
            items = sorted((k, c) for (f, k), c in cols.items() if f == fam)
            out[fam] = (np.array([k for k, _ in items], dtype=np.int64), np.array([c for _, c in items], dtype=np.int64))
        return out

    def _linearize(self, cols, jacobians=True):
        """Whitened, IRLS-weighted residuals plus COO Jacobian triplets.

        Factors of each type are evaluated together; every type produces
        stacked residuals ``(K, d)`` and per-variable Jacobian blocks
        ``(family, keys (K,), J (K, d, dv), mask or None)``.
        """
        parts = []
        breakdown: Dict[str, float] = {}
        for kind, facs in self._grouped().items():
            if kind == "reprojection":
                found, cost = self._eval_reprojection(facs, jacobians)
            else:
                found, cost = getattr(self, "_eval_" + kind)(facs)
            breakdown[kind] = cost
            parts.extend(p for p in found if len(p[0]))
        r = np.concatenate([p[0].ravel() for p in parts]) if parts else np.zeros(0)
        if not jacobians:
            return r, None, breakdown
        lookup = self._lookup(cols)
        R_, C_, V_ = [], [], []
        row0 = 0
        for rw, blocks in parts:
            K, d = rw.shape
            base = row0 + d * np.arange(K)
            for fam, keys, J, mask in blocks:
                ks, cs = lookup[fam]
                if not len(ks):
                    continue
                pos = np.minimum(np.searchsorted(ks, keys), len(ks) - 1)
                use = ks[pos] == keys
                if mask is not None:
                    use &= mask
                if not use.any():
                    continue
                c0 = cs[pos[use]]
                dv = J.shape[2]
                rr = np.broadcast_to(base[use, None, None] + np.arange(d)[None, :, None], (len(c0), d, dv))
                cc = np.broadcast_to(c0[:, None, None] + np.arange(dv)[None, None, :], (len(c0), d, dv))
                R_.append(rr.ravel())
                C_.append(cc.ravel())
                V_.append(J[use].ravel())
            row0 += K * d
        if V_:
            trip = (np.concatenate(R_), np.concatenate(C_), np.concatenate(V_))
        else:
            trip = (np.zeros(0, int), np.zeros(0, int), np.zeros(0))
        return r, trip, breakdown

    def _grouped(self):
        # factors are only ever appended, so the count identifies the cache
        if self._groups is None or self._groups[0] != len(self.factors):
            by_kind: Dict[str, list] = {}
            for f in self.factors:
                by_kind.setdefault(f.kind, []).append(f)
            self._groups = (len(self.factors), by_kind)
            self._static = {}
        return self._groups[1]

    def _static_arrays(self, kind, build):
        self._grouped()
        if kind not in self._static:
            self._static[kind] = build()
        return self._static[kind]

    def _robust(self, r, sqrt_info):
        """Huber cost and whitening scale per row of ``r`` (K, d)."""
        e = np.linalg.norm(r, axis=1)
        delta = self.huber_delta
        if delta is None:
            cost, irls = e * e, np.ones_like(e)
        else:
            big = e > delta
            cost = np.where(big, 2.0 * delta * e - delta * delta, e * e)
            irls = np.where(big, delta / np.maximum(e, 1e-300), 1.0)
        return float(np.sum(sqrt_info**2 * cost)), sqrt_info * np.sqrt(irls)

    def _pose_arrays(self, keys):
        keys = np.asarray(keys, dtype=np.int64)
        order = np.array(sorted(self.poses), dtype=np.int64)
        R = np.array([self.poses[k].rotation for k in order]).reshape(-1, 3, 3)
        t = np.array([self.poses[k].translation for k in order]).reshape(-1, 3)
        idx = np.searchsorted(order, keys)
        return R[idx], t[idx]

    def _point_array(self, keys):
        order = np.array(sorted(self.points), dtype=np.int64)
        P = np.array([self.points[k] for k in order]).reshape(-1, 3)
        return P[np.searchsorted(order, keys)]

    def _eval_reprojection(self, facs, jacobians=True):
        pk, ik, jk, oi, oj = self._static_arrays("reprojection", lambda: (
            np.array([f.point for f in facs], dtype=np.int64),
            np.array([f.i for f in facs], dtype=np.int64),
            np.array([f.j for f in facs], dtype=np.int64),
            np.array([f.obs_i for f in facs]).reshape(-1, 2),
            np.array([f.obs_j for f in facs]).reshape(-1, 2),
        ))
        Ri, ti = self._pose_arrays(ik)
        Rj, tj = self._pose_arrays(jk)
        r, Jp, Ji, Jj, ok = reprojection_batch(self._point_array(pk), Ri, ti, Rj, tj, oi, oj, self.intr, jacobians)
        cost, s = self._robust(r[ok], 1.0 / self.pixel_sigma)
        if not jacobians:
            return [(s[:, None] * r[ok], [])], cost
        r, Jp, Ji, Jj = r[ok], Jp[ok], Ji[ok], Jj[ok]
        w = s[:, None, None]
        return [(s[:, None] * r, [
            ("p", pk[ok], w * Jp, None),
            ("x", ik[ok], w * Ji, None),
            ("x", jk[ok], w * Jj, None),
        ])], cost

    def _eval_odometry(self, facs):
        ik, jk, Ru, tu, W = self._static_arrays("odometry", lambda: (
            np.array([f.i for f in facs], dtype=np.int64),
            np.array([f.j for f in facs], dtype=np.int64),
            np.array([f.measurement.rotation for f in facs]),
            np.array([f.measurement.translation for f in facs]),
            np.array([f.sqrt_info for f in facs]),
        ))
        Ri, ti = self._pose_arrays(ik)
        Rj, tj = self._pose_arrays(jk)
        r, Ji, Jj = odometry_batch(Ri, ti, Rj, tj, Ru, tu)
        rw = W * r
        blocks = [("x", ik, W[:, :, None] * Ji, None), ("x", jk, W[:, :, None] * Jj, None)]
        return [(rw, blocks)], float(np.sum(rw**2))

    def _eval_bbox(self, facs):
        groups: Dict[bool, list] = {}
        for f in facs:
            groups.setdefault(isinstance(self.landmarks[f.landmark], CylinderModel), []).append(f)
        parts, total = [], 0.0
        for is_cyl, g in sorted(groups.items()):
            models = [self.landmarks[f.landmark] for f in g]
            centers = np.array([m.center for m in models])
            yaws = np.array([m.yaw for m in models], dtype=float)
            R, t = self._pose_arrays([f.pose for f in g])
            obs = np.array([f.observed for f in g])
            if is_cyl:
                # the bounding points depend on the viewpoint
                R_cm = np.transpose(R, (0, 2, 1))
                t_cm = -np.einsum("kij,kj->ki", R_cm, t)
                radius = np.array([m.radius for m in models])
                height = np.array([m.height for m in models])
                canon, front = cylinder_silhouette_offsets(radius, height, centers, R_cm, t_cm)
            else:
                canon = np.array([m.moved(m.center, 0.0).offsets() for m in models])
                front = np.ones(len(g), dtype=bool)
            r, Jc, Jyaw, Jx, active = bbox_batch(centers, yaws, canon, R, t, obs, self.intr)
            active &= front
            # a landmark behind this camera leaves the factor inactive
            if not active.any():
                continue
            r, Jc, Jyaw, Jx = r[active], Jc[active], Jyaw[active], Jx[active]
            g = [f for f, a in zip(g, active) if a]
            info = np.array([f.sqrt_info for f in g])
            cost, s = self._robust(r, info)
            total += cost
            w = s[:, None, None]
            lm_keys = np.array([f.landmark for f in g], dtype=np.int64)
            pose_keys = np.array([f.pose for f in g], dtype=np.int64)
            is_cuboid = np.array([landmark_dof(self.landmarks[f.landmark]) == 4 for f in g])
            # landmark blocks are split by DOF so every stack is rectangular
            blocks = [
                ("x", pose_keys, w * Jx, None),
                ("l", lm_keys, w * Jc, ~is_cuboid),
                ("l", lm_keys, w * np.concatenate([Jc, Jyaw[:, :, None]], axis=2), is_cuboid),
            ]
            parts.append((s[:, None] * r, blocks))
        return parts, total

    def _eval_point_landmark(self, facs):
        rs, Jps, cost = [], [], 0.0
        Jl = {3: np.zeros((len(facs), 3, 3)), 4: np.zeros((len(facs), 3, 4))}
        dof = np.zeros(len(facs), dtype=int)
        for k, f in enumerate(facs):
            r, Jp, J = residual_point_landmark(self.points[f.point], self.landmarks[f.landmark], f.sharpness, True)
            rs.append(f.sqrt_info * r)
            Jps.append(f.sqrt_info * Jp)
            dof[k] = J.shape[1]
            Jl[dof[k]][k] = f.sqrt_info * J
            cost += float(f.sqrt_info**2 * (r @ r))
        pk = np.array([f.point for f in facs], dtype=np.int64)
        lk = np.array([f.landmark for f in facs], dtype=np.int64)
        blocks = [("p", pk, np.array(Jps), None), ("l", lk, Jl[3], dof == 3), ("l", lk, Jl[4], dof == 4)]
        return [(np.array(rs).reshape(-1, 3), blocks)], cost

    def _eval_ground_plane(self, facs):
        rs, Js = [], []
        for f in facs:
            r, J = residual_ground_plane(self.poses[f.pose], f.reference, jacobians=True)
            rs.append(f.sqrt_info * r)
            Js.append(f.sqrt_info[:, None] * J)
        rw = np.array(rs).reshape(-1, 4)
        keys = np.array([f.pose for f in facs], dtype=np.int64)
        return [(rw, [("x", keys, np.array(Js), None)])], float(np.sum(rw**2))

    def cost(self):
        cols, _ = self._index()
        _, _, br = self._linearize(cols, jacobians=False)
        return float(sum(br.values())), br

    def dump(self) -> str:
        """Plain-text listing for debugging: one variable or factor per line,
        whitespace separated, numbers in ``%.9g``. Poses are written as
        ``tx ty tz qx qy qz qw``."""
        num = lambda v: " ".join(f"{float(x):.9g}" for x in np.ravel(v))

        def pose_txt(p):
            return num(np.concatenate([p.translation, Rotation.from_matrix(p.rotation).as_quat()]))

        lines = [f"# semslam-graph 1 poses={len(self.poses)} points={len(self.points)} "
                 f"landmarks={len(self.landmarks)} factors={len(self.factors)}"]
        for k in sorted(self.poses):
            lines.append(f"var pose x{k} {'fixed' if k in self.fixed else 'free'} {pose_txt(self.poses[k])}")
        for k in sorted(self.points):
            lines.append(f"var point p{k} {num(self.points[k])}")
        for k in sorted(self.landmarks):
            m = self.landmarks[k]
            lines.append(f"var landmark l{k} {m.shape} {m.label} {num(m.center)} {m.yaw:.9g}")
        for f in self.factors:
            if f.kind == "odometry":
                body = f"x{f.i} x{f.j} {pose_txt(f.measurement)} {num(f.sqrt_info)}"
            elif f.kind == "reprojection":
                body = f"p{f.point} x{f.i} x{f.j} {num(f.obs_i)} {num(f.obs_j)}"
            elif f.kind == "bbox":
                body = f"l{f.landmark} x{f.pose} {num(f.observed)} {f.sqrt_info:.9g}"
            elif f.kind == "point_landmark":
                body = f"p{f.point} l{f.landmark} {f.sqrt_info:.9g}"
            else:
                body = f"x{f.pose} {num(f.reference.normal)} {f.reference.offset:.9g} {num(f.sqrt_info)}"
            lines.append(f"factor {f.kind} {body}")
        return "\n".join(lines) + "\n"

    # -- state update ------------------------------------------------------
    def _snapshot(self):
        return dict(self.poses), {k: v.copy() for k, v in self.points.items()}, dict(self.landmarks)

    def _restore(self, snap):
        self.poses, self.points, self.landmarks = snap

    def _retract(self, cols, delta):
        for key, c0 in cols.items():
            fam, k = key
            if fam == "x":
                R, t = se3_exp(delta[c0:c0 + 6])
                self.poses[k] = self.poses[k] @ Pose(R, t)
            elif fam == "p":
                self.points[k] = self.points[k] + delta[c0:c0 + 3]
            else:
                m = self.landmarks[k]
                d = landmark_dof(m)
                step = delta[c0:c0 + d]
                yaw = m.yaw + step[3] if d == 4 else None
                self.landmarks[k] = m.moved(m.center + step[:3], yaw)

    def optimize(self, config: Optional[SolverConfig] = None) -> OptimizationResult:
        """Levenberg-Marquardt; only steps that lower the robust cost are kept.
        The graph's variables are updated in place."""
        cfg = config or SolverConfig()
        self.huber_delta = cfg.huber_delta
        if self.poses and not (self.fixed & set(self.poses)):
            raise SingularNormalEquations("graph has no anchored pose")
        cols, n = self._index()
        pcols = [c for (fam, _), c in cols.items() if fam == "p"]
        point_span = (min(pcols), max(pcols) + 3) if pcols else None
        cost0, br = self.cost()
        history = [cost0]
        if n == 0:
            return OptimizationResult(cost0, cost0, 0, True, br, history)
        cost = cost0
        lam = cfg.initial_lambda
        converged = False
        it = 0
        for it in range(1, cfg.max_iterations + 1):
            if cost <= cfg.absolute_tolerance:
                converged = True
                it -= 1
                break
            r, (ri, ci, vi), _ = self._linearize(cols)
            J = sp.csr_matrix((vi, (ri, ci)), shape=(len(r), n))
            H = (J.T @ J).tocsc()
            g = J.T @ r
            # variables whose factors are all inactive get a tiny damping term
            diag = np.maximum(H.diagonal(), 1e-9)
            accepted = False
            solved = False
            while lam <= cfg.max_lambda:
                A = H + sp.diags(lam * diag)
                step = _solve(A, -g, point_span)
                if step is None:
                    lam *= cfg.lambda_up
                    continue
                solved = True
                snap = self._snapshot()
                self._retract(cols, step)
                new_cost, _ = self.cost()
                if new_cost < cost:
                    accepted = True
                    lam = max(lam / cfg.lambda_down, 1e-12)
                    break
                self._restore(snap)
                lam *= cfg.lambda_up
            if not solved:
                raise SingularNormalEquations("normal equations could not be solved at any damping")
            if not accepted:
                converged = True
                break
            rel = (cost - new_cost) / max(cost, 1e-300)
            cost = new_cost
            history.append(cost)
            if rel < cfg.relative_tolerance or cost <= cfg.absolute_tolerance:
                converged = True
                break
        final, br = self.cost()
        return OptimizationResult(cost0, final, it, converged, br, history)
