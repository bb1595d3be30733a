"""SO(3)/SE(3) helpers.

Rotations are plain 3x3 numpy arrays. Poses are :class:`Pose` values holding a
rotation and a translation. SE(3) tangent vectors are ordered rotation first,
translation second: ``xi = [phi, rho]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
_I3 = np.eye(3)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def cross(a, b) -> np.ndarray:
    """3-vector cross product without the overhead of ``np.cross``."""
    return np.array(
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    )


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


# below this theta^2 the (theta - sin) and 1/theta^2 - ... forms lose digits
SERIES_THETA2 = 1e-2


def _jac_coeffs(theta2: float) -> tuple[float, float, float]:
    """``(1-cos)/t^2``, ``(t-sin)/t^3`` and the inverse-Jacobian ``W^2`` coefficient."""
    if theta2 < SERIES_THETA2:
        t2, t4, t6 = theta2, theta2**2, theta2**3
        b = 1 / 6 - t2 / 120 + t4 / 5040 - t6 / 362880
        c = 1 / 12 + t2 / 720 + t4 / 30240 + t6 / 1209600
        half = math.sin(0.5 * math.sqrt(theta2)) if theta2 > 0 else 0.0
        a = 2.0 * half * half / theta2 if theta2 > 0 else 0.5
        return a, b, c
    theta = math.sqrt(theta2)
    half = math.sin(0.5 * theta)
    a = 2.0 * half * half / theta2
    b = (theta - math.sin(theta)) / (theta2 * theta)
    c = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return a, b, c


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula, with a second-order series below ``SMALL_ANGLE``."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    W = skew(w)
    if theta2 < SMALL_ANGLE**2:
        return _I3 + W + 0.5 * (W @ W)
    theta = math.sqrt(theta2)
    a = math.sin(theta) / theta
    half = math.sin(0.5 * theta)
    b = 2.0 * half * half / theta2
    return _I3 + a * W + b * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`so3_exp` with angle in ``[0, pi]``.

    At exactly ``pi`` the axis sign is ambiguous; the axis whose first nonzero
    component is positive is returned.
    """
    R = np.asarray(R, dtype=float)
    s = 0.5 * vee(R - R.T)
    sin_t = math.sqrt(float(s @ s))
    cos_t = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
    theta = math.atan2(sin_t, cos_t)
    if theta < SMALL_ANGLE:
        return s * (1.0 + theta**2 / 6.0)
    if np.pi - theta > 1e-6:
        return theta / sin_t * s
    # near pi: recover the axis from the symmetric part R = -I + 2 n n^T
    B = 0.5 * (R + np.eye(3))
    k = int(np.argmax(np.diag(B)))
    n = B[:, k] / np.sqrt(max(B[k, k], 0.0))
    if np.pi - theta > 1e-12:
        # keep sign consistent with the antisymmetric part
        if n @ s < 0:
            n = -n
    else:
        nz = n[np.abs(n) > 1e-12]
        if nz.size and nz[0] < 0:
            n = -n
    n /= np.linalg.norm(n)
    return theta * n


def so3_right_jacobian(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    W = skew(w)
    if theta2 < SMALL_ANGLE**2:
        return _I3 - 0.5 * W + (W @ W) / 6.0
    a, b, _ = _jac_coeffs(theta2)
    return _I3 - a * W + b * (W @ W)


def so3_right_jacobian_inv(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    W = skew(w)
    if theta2 < SMALL_ANGLE**2:
        return _I3 + 0.5 * W + (W @ W) / 12.0
    _, _, c = _jac_coeffs(theta2)
    return _I3 + 0.5 * W + c * (W @ W)


def so3_left_jacobian(w) -> np.ndarray:
    return so3_right_jacobian(-np.asarray(w, dtype=float))


def so3_left_jacobian_inv(w) -> np.ndarray:
    return so3_right_jacobian_inv(-np.asarray(w, dtype=float))


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(
        np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol
    )


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def from_rpy(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """World-from-body rotation ``Rz(yaw) Ry(pitch) Rx(roll)``."""
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def to_rpy(R: np.ndarray) -> tuple[float, float, float]:
    pitch = float(np.arcsin(np.clip(-R[2, 0], -1.0, 1.0)))
    roll = float(np.arctan2(R[2, 1], R[2, 2]))
    yaw = float(np.arctan2(R[1, 0], R[0, 0]))
    return roll, pitch, yaw


def normalize_rotation(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1
        out = U @ Vt
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``T_AB``: maps points in frame B to frame A."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)

    def inverse(self) -> Pose:
        return inverse(self)

    def act(self, point) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        return is_rotation(self.rotation, tol) and bool(np.all(np.isfinite(self.translation)))


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(T: Pose) -> Pose:
    Rt = T.rotation.T
    return Pose(Rt, -Rt @ T.translation)


def _se3_q(phi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    # Barfoot's Q block of the SE(3) left Jacobian
    theta2 = float(phi @ phi)
    P = skew(phi)
    Rh = skew(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = P @ RP
    if theta2 < 1e-2:
        # the closed forms cancel catastrophically here; Taylor terms to theta^6
        t2, t4, t6 = theta2, theta2**2, theta2**3
        a = 1 / 6 - t2 / 120 + t4 / 5040 - t6 / 362880
        b = 1 / 24 - t2 / 720 + t4 / 40320 - t6 / 3628800
        e = -1 / 120 + t2 / 5040 - t4 / 362880 + t6 / 39916800
    else:
        theta = np.sqrt(theta2)
        s, c = np.sin(theta), np.cos(theta)
        a = (theta - s) / theta**3
        b = (0.5 * theta2 + c - 1.0) / theta2**2
        e = (theta - s - theta**3 / 6.0) / theta**5
    d = 0.5 * (b + 3.0 * e)
    return (
        0.5 * Rh
        + a * (PR + RP + PRP)
        + b * (P @ PR + RP @ P - 3.0 * PRP)
        + d * (PRP @ P + P @ PRP)
    )


def se3_exp(xi) -> Pose:
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[:3], xi[3:]
    return Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def se3_log(T: Pose) -> np.ndarray:
    phi = so3_log(T.rotation)
    rho = so3_left_jacobian_inv(phi) @ T.translation
    return np.concatenate([phi, rho])


def adjoint(T: Pose) -> np.ndarray:
    """Adjoint in rotation-first ordering: ``T exp(xi) T^-1 = exp(Ad xi)``."""
    R, p = T.rotation, T.translation
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = R
    Ad[3:, 3:] = R
    Ad[3:, :3] = skew(p) @ R
    return Ad


def se3_left_jacobian(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[:3], xi[3:]
    J = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[3:, :3] = _se3_q(phi, rho)
    return out


def se3_left_jacobian_inv(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[:3], xi[3:]
    Jinv = so3_left_jacobian_inv(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[3:, :3] = -Jinv @ _se3_q(phi, rho) @ Jinv
    return out


def se3_right_jacobian_inv(xi) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


# -- stacked variants: leading axis indexes independent elements --------------


def skew_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1], out[..., 0, 2] = -z, y
    out[..., 1, 0], out[..., 1, 2] = z, -x
    out[..., 2, 0], out[..., 2, 1] = -y, x
    return out


def _rodrigues_coeffs(theta2: np.ndarray):
    small = theta2 < SMALL_ANGLE**2
    t2 = np.where(small, 1.0, theta2)
    t = np.sqrt(t2)
    return small, t, t2


def _jac_coeffs_batch(theta2: np.ndarray):
    """Vectorized :func:`_jac_coeffs`."""
    small, t, t2 = _rodrigues_coeffs(theta2)
    half = np.sin(0.5 * t)
    a = np.where(small, 0.5, 2.0 * half * half / t2)
    x2, x4, x6 = theta2, theta2**2, theta2**3
    series = theta2 < SERIES_THETA2
    tc = np.where(series, 1.0, t)
    tc2 = tc * tc
    b = np.where(
        series, 1 / 6 - x2 / 120 + x4 / 5040 - x6 / 362880, (tc - np.sin(tc)) / (tc2 * tc)
    )
    c = np.where(
        series,
        1 / 12 + x2 / 720 + x4 / 30240 + x6 / 1209600,
        1.0 / tc2 - (1.0 + np.cos(tc)) / (2.0 * tc * np.sin(tc)),
    )
    return a, b, c


def so3_exp_batch(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    small, t, t2 = _rodrigues_coeffs(np.einsum("...i,...i->...", w, w))
    a = np.where(small, 1.0, np.sin(t) / t)
    half = np.sin(0.5 * t)
    b = np.where(small, 0.5, 2.0 * half * half / t2)
    W = skew_batch(w)
    return _I3 + a[..., None, None] * W + b[..., None, None] * (W @ W)


def so3_log_batch(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    s = 0.5 * np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1)
    sin_t = np.sqrt(np.einsum("...i,...i->...", s, s))
    cos_t = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(sin_t, cos_t)
    small = theta < SMALL_ANGLE
    scale = np.where(small, 1.0 + theta**2 / 6.0, theta / np.where(small, 1.0, sin_t))
    out = scale[..., None] * s
    near_pi = np.pi - theta <= 1e-6
    if np.any(near_pi):
        for idx in zip(*np.nonzero(near_pi)):
            out[idx] = so3_log(R[idx])
    return out


def so3_right_jacobian_batch(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    a, b, _ = _jac_coeffs_batch(np.einsum("...i,...i->...", w, w))
    W = skew_batch(w)
    return _I3 - a[..., None, None] * W + b[..., None, None] * (W @ W)


def so3_right_jacobian_inv_batch(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    _, _, c = _jac_coeffs_batch(np.einsum("...i,...i->...", w, w))
    W = skew_batch(w)
    return _I3 + 0.5 * W + c[..., None, None] * (W @ W)


def _se3_q_batch(phi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    theta2 = np.einsum("...i,...i->...", phi, phi)
    P = skew_batch(phi)
    Rh = skew_batch(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = P @ RP
    series = theta2 < 1e-2
    t2 = theta2
    a_s = 1 / 6 - t2 / 120 + t2**2 / 5040 - t2**3 / 362880
    b_s = 1 / 24 - t2 / 720 + t2**2 / 40320 - t2**3 / 3628800
    e_s = -1 / 120 + t2 / 5040 - t2**2 / 362880 + t2**3 / 39916800
    tt2 = np.where(series, 1.0, theta2)
    th = np.sqrt(tt2)
    sn, cs = np.sin(th), np.cos(th)
    a = np.where(series, a_s, (th - sn) / th**3)
    b = np.where(series, b_s, (0.5 * tt2 + cs - 1.0) / tt2**2)
    e = np.where(series, e_s, (th - sn - th**3 / 6.0) / th**5)
    d = 0.5 * (b + 3.0 * e)
    x = lambda c: c[..., None, None]  # noqa: E731
    return 0.5 * Rh + x(a) * (PR + RP + PRP) + x(b) * (P @ PR + RP @ P - 3.0 * PRP) + x(d) * (PRP @ P + P @ PRP)


def se3_log_batch(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    phi = so3_log_batch(R)
    Jl_inv = so3_right_jacobian_inv_batch(-phi)
    rho = np.einsum("...ij,...j->...i", Jl_inv, t)
    return np.concatenate([phi, rho], axis=-1)


def se3_right_jacobian_inv_batch(xi: np.ndarray) -> np.ndarray:
    xi = -np.asarray(xi, dtype=float)
    phi, rho = xi[..., :3], xi[..., 3:]
    Jinv = so3_right_jacobian_inv_batch(-phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Jinv
    out[..., 3:, 3:] = Jinv
    out[..., 3:, :3] = -Jinv @ _se3_q_batch(phi, rho) @ Jinv
    return out
