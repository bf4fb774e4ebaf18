"""SO(3) / SE(3) maps and Jacobians.

Tangent vectors of SE(3) are ordered ``(rho, phi)``: translation part first,
rotation part second. Pose perturbations are applied on the right,
``T <- T @ Exp(delta)``.
"""

import numpy as np
from scipy.spatial.transform import Rotation

_SMALL = 1e-8


def hat(v):
    """Skew-symmetric matrix such that ``hat(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < _SMALL:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def so3_log(R):
    # scipy handles the theta -> pi branch robustly
    return Rotation.from_matrix(R).as_rotvec()


def _inv_coeff(theta):
    # coefficient of hat(phi)^2 in the inverse SO(3) Jacobian
    if theta < 1e-4:
        return 1.0 / 12.0 + theta**2 / 720.0
    half = 0.5 * theta
    return 1.0 / theta**2 - np.cos(half) / (2.0 * theta * np.sin(half))


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < 1e-4:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * K + b * K @ K


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    K = hat(phi)
    return np.eye(3) - 0.5 * K + _inv_coeff(np.linalg.norm(phi)) * K @ K


def so3_right_jacobian_inv(phi):
    return so3_left_jacobian_inv(-np.asarray(phi, dtype=float))


def se3_exp(xi):
    """Exponential map, returns ``(R, t)``."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    return so3_exp(phi), so3_left_jacobian(phi) @ rho


def se3_log(R, t):
    phi = so3_log(R)
    rho = so3_left_jacobian_inv(phi) @ np.asarray(t, dtype=float)
    return np.concatenate([rho, phi])


def _q_matrix(rho, phi):
    theta = np.linalg.norm(phi)
    P = hat(phi)
    Rh = hat(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = P @ Rh @ P
    if theta < 1e-3:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (theta**2 + 2.0 * c - 2.0) / (2.0 * theta**4)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta**5)
    return (
        0.5 * Rh
        + c1 * (PR + RP + PRP)
        + c2 * (P @ PR + RP @ P - 3.0 * PRP)
        + c3 * (PRP @ P + P @ PRP)
    )


def se3_left_jacobian_inv(xi):
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    Ji = so3_left_jacobian_inv(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Ji
    out[3:, 3:] = Ji
    out[:3, 3:] = -Ji @ _q_matrix(rho, phi) @ Ji
    return out


def se3_right_jacobian_inv(xi):
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def se3_adjoint(R, t):
    out = np.zeros((6, 6))
    out[:3, :3] = R
    out[3:, 3:] = R
    out[:3, 3:] = hat(t) @ R
    return out


# -- batched variants (leading axis indexes independent elements) ----------------


def hat_batch(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _inv_coeff_batch(theta):
    small = theta < 1e-4
    th = np.where(small, 1.0, theta)
    half = 0.5 * th
    big = 1.0 / th**2 - np.cos(half) / (2.0 * th * np.sin(half))
    return np.where(small, 1.0 / 12.0 + theta**2 / 720.0, big)


def so3_left_jacobian_inv_batch(phi):
    K = hat_batch(phi)
    c = _inv_coeff_batch(np.linalg.norm(phi, axis=-1))
    return np.eye(3) - 0.5 * K + c[:, None, None] * (K @ K)


def se3_log_batch(R, t):
    phi = Rotation.from_matrix(R).as_rotvec()
    rho = np.einsum("kij,kj->ki", so3_left_jacobian_inv_batch(phi), t)
    return np.concatenate([rho, phi], axis=1)


def _q_matrix_batch(rho, phi):
    theta = np.linalg.norm(phi, axis=-1)
    P, Rh = hat_batch(phi), hat_batch(rho)
    PR, RP = P @ Rh, Rh @ P
    PRP = PR @ P
    small = theta < 1e-3
    th = np.where(small, 1.0, theta)
    s, c = np.sin(th), np.cos(th)
    t2 = theta * theta
    c1 = np.where(small, 1.0 / 6.0 - t2 / 120.0, (th - s) / th**3)
    c2 = np.where(small, 1.0 / 24.0 - t2 / 720.0, (th**2 + 2.0 * c - 2.0) / (2.0 * th**4))
    c3 = np.where(small, 1.0 / 120.0 - t2 / 2520.0, (2.0 * th - 3.0 * s + th * c) / (2.0 * th**5))
    e = (slice(None), None, None)
    return 0.5 * Rh + c1[e] * (PR + RP + PRP) + c2[e] * (P @ PR + RP @ P - 3.0 * PRP) + c3[e] * (PRP @ P + P @ PRP)


def se3_right_jacobian_inv_batch(xi):
    xi = -np.asarray(xi, dtype=float)
    rho, phi = xi[:, :3], xi[:, 3:]
    Ji = so3_left_jacobian_inv_batch(phi)
    out = np.zeros((len(xi), 6, 6))
    out[:, :3, :3] = Ji
    out[:, 3:, 3:] = Ji
    out[:, :3, 3:] = -Ji @ _q_matrix_batch(rho, phi) @ Ji
    return out


def se3_adjoint_batch(R, t):
    out = np.zeros((len(R), 6, 6))
    out[:, :3, :3] = R
    out[:, 3:, 3:] = R
    out[:, :3, 3:] = hat_batch(t) @ R
    return out
