"""Residuals of the joint least-squares problem and their analytic Jacobians.

Pose arguments are camera poses ``world_from_cam``; pose Jacobians are taken
w.r.t. the right perturbation ``T @ Exp(delta)`` with ``delta = (rho, phi)``.
Landmark Jacobians are w.r.t. the centre (3 columns) plus, for cuboids, yaw
(a 4th column).
"""

from __future__ import annotations

import numpy as np

from .geometry import (
    BBox2D,
    CameraIntrinsics,
    CuboidModel,
    CylinderModel,
    GroundPlane,
    LandmarkModel,
    NonPositiveDepth,
    Pose,
    Z_UP_GROUND,
    clamp_box,
    model_box_jacobians,
    project_points,
    projection_jacobian,
    rot_z,
    rot_z_derivative,
)
from .lie import (
    hat,
    se3_adjoint,
    se3_adjoint_batch,
    se3_log,
    se3_log_batch,
    se3_right_jacobian_inv,
    se3_right_jacobian_inv_batch,
)

CLAMP_WEIGHT = 0.25
TRUNCATION_SHARPNESS = 100.0


class PointBehindCamera(NonPositiveDepth):
    pass


def landmark_dof(model: LandmarkModel) -> int:
    return 4 if isinstance(model, CuboidModel) else 3


def residual_odometry(x_i: Pose, x_j: Pose, u: Pose, jacobians=False):
    """``Log((x_i @ u)^-1 @ x_j)``: zero when the relative pose matches ``u``."""
    pred = x_i @ u
    E = pred.inverse() @ x_j
    r = se3_log(E.rotation, E.translation)
    if not jacobians:
        return r
    Jr_inv = se3_right_jacobian_inv(r)
    rel = x_j.inverse() @ x_i
    J_i = -Jr_inv @ se3_adjoint(rel.rotation, rel.translation)
    return r, J_i, Jr_inv


def _cam_point(p, x: Pose):
    return x.rotation.T @ (p - x.translation)


def residual_reprojection(p, x_i: Pose, x_j: Pose, obs_i, obs_j, intr: CameraIntrinsics, jacobians=False):
    """Stacked pixel errors of point ``p`` in two consecutive frames."""
    p = np.asarray(p, dtype=float)
    out = []
    jac = []
    for x, obs in ((x_i, obs_i), (x_j, obs_j)):
        pc = _cam_point(p, x)
        if pc[2] <= 0:
            raise PointBehindCamera(f"point depth {pc[2]:.3g} is not positive")
        out.append(project_points(intr, pc) - np.asarray(obs, dtype=float))
        if jacobians:
            Jp = projection_jacobian(intr, pc)
            jac.append((Jp @ x.rotation.T, np.hstack([-Jp, Jp @ hat(pc)])))
    r = np.concatenate(out)
    if not jacobians:
        return r
    J_p = np.vstack([jac[0][0], jac[1][0]])
    J_i = np.vstack([jac[0][1], np.zeros((2, 6))])
    J_j = np.vstack([np.zeros((2, 6)), jac[1][1]])
    return r, J_p, J_i, J_j


def residual_bbox(landmark: LandmarkModel, x_i: Pose, observed, intr: CameraIntrinsics, jacobians=False, clamp_weight=CLAMP_WEIGHT):
    """Predicted minus observed box ``(x_min, y_min, x_max, y_max)``.

    The prediction is clamped to the image; when any side was clamped the
    whole residual is scaled by ``clamp_weight``.
    """
    obs = observed.as_array() if isinstance(observed, BBox2D) else np.asarray(observed, dtype=float)
    raw, mask, J_c, J_yaw, J_x = model_box_jacobians(landmark, x_i.inverse(), intr)
    pred = clamp_box(raw, intr)
    w = clamp_weight if mask.any() else 1.0
    r = w * (pred - obs)
    if not jacobians:
        return r
    J_l = J_c if isinstance(landmark, CylinderModel) else np.column_stack([J_c, J_yaw])
    return r, w * J_l, w * J_x, bool(mask.any())


def _softplus(x, k):
    return np.logaddexp(0.0, k * x) / k


def _sigmoid(x, k):
    return 0.5 * (1.0 + np.tanh(0.5 * k * x))


def _axis_violation(q, half, k):
    """Signed distance outside ``[-half, half]`` and its derivative."""
    if k is None:
        v = np.sign(q) * np.maximum(np.abs(q) - half, 0.0)
        d = (np.abs(q) > half).astype(float)
        return v, d
    v = _softplus(q - half, k) - _softplus(-q - half, k)
    d = _sigmoid(q - half, k) + _sigmoid(-q - half, k)
    return v, d


def residual_point_landmark(p, landmark: LandmarkModel, sharpness=None, jacobians=False):
    """Truncated offset of point ``p`` from the landmark's volume, in the
    landmark frame: zero inside the volume.

    Cylinders use the radial distance jointly for x/y plus a range check
    along z. ``sharpness`` (e.g. 100) replaces ``max(., 0)`` with a soft-plus.
    """
    p = np.asarray(p, dtype=float)
    Rz = rot_z(landmark.yaw)
    q = Rz.T @ (p - landmark.center)
    if isinstance(landmark, CylinderModel):
        rz, dz = _axis_violation(q[2], 0.5 * landmark.height, sharpness)
        rho = float(np.hypot(q[0], q[1]))
        if rho < 1e-12:
            r = np.array([0.0, 0.0, rz])
            D = np.diag([0.0, 0.0, dz])
        else:
            u = q[:2] / rho
            if sharpness is None:
                mag = max(rho - landmark.radius, 0.0)
                dmag = 1.0 if rho > landmark.radius else 0.0
            else:
                mag = float(_softplus(rho - landmark.radius, sharpness))
                dmag = float(_sigmoid(rho - landmark.radius, sharpness))
            r = np.array([mag * u[0], mag * u[1], rz])
            D = np.zeros((3, 3))
            D[:2, :2] = dmag * np.outer(u, u) + (mag / rho) * (np.eye(2) - np.outer(u, u))
            D[2, 2] = dz
    else:
        r, d = _axis_violation(q, 0.5 * landmark.dims, sharpness)
        D = np.diag(d)
    if not jacobians:
        return r
    J_p = D @ Rz.T
    J_c = -J_p
    if isinstance(landmark, CuboidModel):
        dq_dyaw = rot_z_derivative(landmark.yaw).T @ (p - landmark.center)
        J_c = np.column_stack([J_c, D @ dq_dyaw])
    return r, J_p, J_c


def residual_ground_plane(x: Pose, reference: GroundPlane, world_ground: GroundPlane = Z_UP_GROUND, jacobians=False):
    """World ground plane seen from pose ``x`` minus the camera-frame
    reference plane: normal difference (3) and offset difference (1)."""
    R, t = x.rotation, x.translation
    n_pred = R.T @ world_ground.normal
    d_pred = world_ground.offset - world_ground.normal @ t
    r = np.concatenate([n_pred - reference.normal, [d_pred - reference.offset]])
    if not jacobians:
        return r
    J = np.zeros((4, 6))
    J[:3, 3:] = hat(n_pred)
    J[3, :3] = -n_pred
    return r, J


def reprojection_batch(P, R_i, t_i, R_j, t_j, obs_i, obs_j, intr: CameraIntrinsics, jacobians=True):
    """Vectorised :func:`residual_reprojection` over K factors.

    Returns ``r (K,4), J_p (K,4,3), J_i (K,4,6), J_j (K,4,6), depth_ok (K,)``;
    the Jacobians are ``None`` when not requested.
    """
    K = len(P)
    r = np.zeros((K, 4))
    J_p = np.zeros((K, 4, 3))
    J_i = np.zeros((K, 4, 6))
    J_j = np.zeros((K, 4, 6))
    ok = np.ones(K, dtype=bool)
    for col, (R, t, obs, Jx) in enumerate(((R_i, t_i, obs_i, J_i), (R_j, t_j, obs_j, J_j))):
        pc = np.einsum("kji,kj->ki", R, P - t)  # R^T (P - t)
        z = pc[:, 2]
        ok &= z > 1e-9
        zs = np.where(z > 1e-9, z, 1.0)
        x, y = pc[:, 0] / zs, pc[:, 1] / zs
        rows = slice(2 * col, 2 * col + 2)
        r[:, rows] = np.column_stack([intr.fx * x + intr.cx, intr.fy * y + intr.cy]) - obs
        if not jacobians:
            continue
        Jproj = np.zeros((K, 2, 3))
        Jproj[:, 0, 0] = intr.fx / zs
        Jproj[:, 0, 2] = -intr.fx * x / zs
        Jproj[:, 1, 1] = intr.fy / zs
        Jproj[:, 1, 2] = -intr.fy * y / zs
        J_p[:, rows] = np.einsum("kab,kcb->kac", Jproj, R)  # Jproj @ R^T
        Jx[:, rows, :3] = -Jproj
        hats = np.zeros((K, 3, 3))
        hats[:, 0, 1], hats[:, 0, 2] = -pc[:, 2], pc[:, 1]
        hats[:, 1, 0], hats[:, 1, 2] = pc[:, 2], -pc[:, 0]
        hats[:, 2, 0], hats[:, 2, 1] = -pc[:, 1], pc[:, 0]
        Jx[:, rows, 3:] = np.einsum("kab,kbc->kac", Jproj, hats)
    if not jacobians:
        return r, None, None, None, ok
    return r, J_p, J_i, J_j, ok


def odometry_batch(R_i, t_i, R_j, t_j, R_u, t_u):
    """Vectorised :func:`residual_odometry`: ``r (K,6), J_i, J_j (K,6,6)``."""
    R_p = R_i @ R_u
    t_p = np.einsum("kab,kb->ka", R_i, t_u) + t_i
    E_R = np.swapaxes(R_p, 1, 2) @ R_j
    E_t = np.einsum("kba,kb->ka", R_p, t_j - t_p)
    r = se3_log_batch(E_R, E_t)
    Jr_inv = se3_right_jacobian_inv_batch(r)
    R_rel = np.swapaxes(R_j, 1, 2) @ R_i
    t_rel = np.einsum("kba,kb->ka", R_j, t_i - t_j)
    J_i = -Jr_inv @ se3_adjoint_batch(R_rel, t_rel)
    return r, J_i, Jr_inv


def bbox_batch(centers, yaws, canonical, R_wc, t_wc, observed, intr: CameraIntrinsics, clamp_weight=CLAMP_WEIGHT):
    """Vectorised :func:`residual_bbox` for K factors whose landmarks share a
    sample count S.

    ``canonical`` (K, S, 3) holds un-yawed sample offsets. Returns
    ``r (K,4), J_c (K,4,3), J_yaw (K,4), J_x (K,4,6), active (K,)``; factors
    with a sample behind the camera are inactive.
    """
    K = len(centers)
    c, s = np.cos(yaws), np.sin(yaws)
    Rz = np.zeros((K, 3, 3))
    Rz[:, 0, 0], Rz[:, 0, 1], Rz[:, 1, 0], Rz[:, 1, 1], Rz[:, 2, 2] = c, -s, s, c, 1.0
    dRz = np.zeros((K, 3, 3))
    dRz[:, 0, 0], dRz[:, 0, 1], dRz[:, 1, 0], dRz[:, 1, 1] = -s, -c, c, -s
    pw = centers[:, None, :] + np.einsum("kij,ksj->ksi", Rz, canonical)
    pc = np.einsum("kji,ksj->ksi", R_wc, pw - t_wc[:, None, :])
    z = pc[..., 2]
    active = np.all(z > 1e-6, axis=1)
    zs = np.where(z > 1e-6, z, 1.0)
    u = intr.fx * pc[..., 0] / zs + intr.cx
    v = intr.fy * pc[..., 1] / zs + intr.cy
    rows = np.arange(K)
    idx = np.stack([u.argmin(1), v.argmin(1), u.argmax(1), v.argmax(1)], axis=1)
    raw = np.stack([u[rows, idx[:, 0]], v[rows, idx[:, 1]], u[rows, idx[:, 2]], v[rows, idx[:, 3]]], axis=1)
    hi = np.array([intr.width, intr.height, intr.width, intr.height], float)
    pred = np.clip(raw, 0.0, hi)
    mask = pred != raw
    w = np.where(mask.any(axis=1), clamp_weight, 1.0)
    r = w[:, None] * (pred - observed)
    J_c = np.zeros((K, 4, 3))
    J_yaw = np.zeros((K, 4))
    J_x = np.zeros((K, 4, 6))
    for row in range(4):
        k = idx[:, row]
        P = pc[rows, k]
        Z = zs[rows, k]
        jp = np.zeros((K, 3))
        if row % 2 == 0:
            jp[:, 0], jp[:, 2] = intr.fx / Z, -intr.fx * P[:, 0] / Z**2
        else:
            jp[:, 1], jp[:, 2] = intr.fy / Z, -intr.fy * P[:, 1] / Z**2
        keep = (~mask[:, row]) * w
        jp = jp * keep[:, None]
        jw = np.einsum("ka,kba->kb", jp, R_wc)  # jp @ R_wc^T
        J_c[:, row] = jw
        J_yaw[:, row] = np.einsum("kb,kbc,kc->k", jw, dRz, canonical[rows, k])
        J_x[:, row, :3] = -jp
        J_x[:, row, 3:] = np.cross(jp, P)
    return r, J_c, J_yaw, J_x, active
