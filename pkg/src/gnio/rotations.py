"""SO(3) helpers. Quaternions are (w, x, y, z), Hamilton convention."""
from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation, Slerp


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi) -> np.ndarray:
    """Rodrigues formula; exact to second order near zero."""
    phi = np.asarray(phi, dtype=np.float64)
    angle = np.sqrt(phi @ phi)
    K = skew(phi)
    if angle < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + (np.sin(angle) / angle) * K + ((1.0 - np.cos(angle)) / angle**2) * K @ K


def so3_right_jacobian(phi) -> np.ndarray:
    """J_r with Exp(phi + d) ~= Exp(phi) Exp(J_r(phi) d) for small d."""
    phi = np.asarray(phi, dtype=np.float64)
    angle = np.sqrt(phi @ phi)
    K = skew(phi)
    if angle < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (np.eye(3) - ((1.0 - np.cos(angle)) / angle**2) * K
            + ((angle - np.sin(angle)) / angle**3) * K @ K)


def rz(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rx(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def ry(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rz_batch(angles) -> np.ndarray:
    angles = np.asarray(angles, dtype=np.float64)
    c, s = np.cos(angles), np.sin(angles)
    out = np.zeros(angles.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


GIMBAL_EPS = 1e-6


def yaw_of(R) -> np.ndarray:
    """Heading angle of the ZYX decomposition; 0 where pitch is near +-90 deg.

    Works on (3, 3) or (..., 3, 3).
    """
    R = np.asarray(R)
    c0, c1 = R[..., 0, 0], R[..., 1, 0]
    degenerate = np.hypot(c0, c1) < GIMBAL_EPS
    return np.where(degenerate, 0.0, np.arctan2(c1, c0))


def is_gimbal_degenerate(R) -> bool:
    R = np.asarray(R)
    return bool(np.hypot(R[0, 0], R[1, 0]) < GIMBAL_EPS)


def yaw_gradient(R) -> np.ndarray:
    """d(yaw)/d(theta) for a left perturbation R -> Exp(theta) R.

    Zero on the roll/pitch axes when the body is level; exactly (0, 0, 1) on z.
    """
    c = np.asarray(R)[:, 0]
    denom = c[0] ** 2 + c[1] ** 2
    if denom < GIMBAL_EPS**2:
        return np.zeros(3)
    dc = -skew(c)  # d(Exp(theta) c)/d(theta) at 0
    return (c[0] * dc[1] - c[1] * dc[0]) / denom


def orthonormalize(R) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1
        out = U @ Vt
    return out


def quat_to_rot(q) -> np.ndarray:
    """(…, 4) wxyz -> (…, 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat(q[..., [1, 2, 3, 0]]).as_matrix()


def rot_to_quat(R) -> np.ndarray:
    """(…, 3, 3) -> (…, 4) wxyz with non-negative w."""
    xyzw = Rotation.from_matrix(np.asarray(R)).as_quat()
    q = xyzw[..., [3, 0, 1, 2]]
    sign = np.where(q[..., :1] < 0, -1.0, 1.0)
    return q * sign


def slerp(t_src, q_src, t_query) -> np.ndarray:
    """Spherical-linear interpolation of wxyz quaternions; query clipped to the source span."""
    t_src = np.asarray(t_src, dtype=np.float64)
    tq = np.clip(np.asarray(t_query, dtype=np.float64), t_src[0], t_src[-1])
    rots = Rotation.from_quat(np.asarray(q_src)[:, [1, 2, 3, 0]])
    xyzw = Slerp(t_src, rots)(tq).as_quat()
    q = xyzw[..., [3, 0, 1, 2]]
    return q * np.where(q[..., :1] < 0, -1.0, 1.0)
