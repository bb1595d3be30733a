"""Residuals and analytic Jacobians for every factor type in the window.

All Jacobians are taken with respect to the 15-dim node perturbation defined
by :meth:`NavState.retract`. Each factor exposes ``keys`` (node ids),
``linearize(states) -> (residual, [jacobian per key])`` and ``sqrt_info`` for
whitening; ``robust`` marks factors wrapped in a Huber loss and ``row_robust``
applies it to every scalar row separately.
"""
from __future__ import annotations

import numpy as np

from rvlio.geometry import (
    Pose,
    se3_log_batch,
    se3_right_jacobian_inv_batch,
    skew_batch,
    so3_exp_batch,
    so3_log_batch,
    so3_right_jacobian_batch,
    so3_right_jacobian_inv_batch,
    adjoint,
    compose,
    cross,
    inverse,
    se3_log,
    se3_right_jacobian_inv,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)

from .preintegration import PreintegratedImuDelta
from .types import BA, BG, POS, ROT, STATE_DIM, VEL, Extrinsics, LidarRelativePose, NavState, RadarVelocityFactorInput

SELECT_X = np.array([1.0, 0.0, 0.0])
_I3 = np.eye(3)
_I6 = np.eye(6)
_I15 = np.eye(STATE_DIM)


def huber_weight(residual_norm: float, delta: float) -> float:
    """IRLS weight of the Huber loss: 1 inside ``delta``, ``delta/|r|`` beyond."""
    if delta <= 0:
        raise ValueError("Huber delta must be positive")
    r = abs(residual_norm)
    return 1.0 if r <= delta else delta / r


def huber_loss(residual_norm: float, delta: float | None) -> float:
    r = abs(residual_norm)
    if delta is None or r <= delta:
        return 0.5 * r * r
    return delta * (r - 0.5 * delta)


def _sqrt_info_from_cov(cov: np.ndarray) -> np.ndarray:
    info = np.linalg.inv(np.atleast_2d(cov))
    info = 0.5 * (info + info.T)
    return np.linalg.cholesky(info).T


def imu_residual(
    delta: PreintegratedImuDelta,
    state_i: NavState,
    state_j: NavState,
    gravity: np.ndarray,
    jacobians: bool = True,
):
    """9-vector (rotation, velocity, position) and its 9x15 Jacobians w.r.t. both nodes.

    With ``jacobians=False`` only the residual is returned.
    """
    g = np.asarray(gravity, dtype=float)
    T = delta.duration
    Ri, pi, vi = state_i.rotation, state_i.position, state_i.velocity
    Rj, pj, vj = state_j.rotation, state_j.position, state_j.velocity
    dR, dv, dp = delta.corrected(state_i.bias)
    dbg = state_i.gyro_bias - delta.bias_linearization_point[3:]

    Rit = Ri.T
    E = dR.T @ Rit @ Rj
    e_R = so3_log(E)
    u_v = Rit @ (vj - vi - g * T)
    u_p = Rit @ (pj - pi - vi * T - 0.5 * g * T * T)
    e_v = u_v - dv
    e_p = u_p - dp
    e = np.concatenate([e_R, e_v, e_p])
    if not jacobians:
        return e

    Jri = so3_right_jacobian_inv(e_R)
    Ji = np.zeros((9, STATE_DIM))
    Jj = np.zeros((9, STATE_DIM))
    Ji[0:3, ROT] = -Jri @ Rj.T @ Ri
    Ji[0:3, BG] = -Jri @ E.T @ so3_right_jacobian(delta.d_rot_d_bg @ dbg) @ delta.d_rot_d_bg
    Jj[0:3, ROT] = Jri

    Ji[3:6, ROT] = skew(u_v)
    Ji[3:6, VEL] = -Rit
    Ji[3:6, BA] = -delta.d_vel_d_ba
    Ji[3:6, BG] = -delta.d_vel_d_bg
    Jj[3:6, VEL] = Rit

    Ji[6:9, ROT] = skew(u_p)
    Ji[6:9, POS] = -_I3
    Ji[6:9, VEL] = -Rit * T
    Ji[6:9, BA] = -delta.d_pos_d_ba
    Ji[6:9, BG] = -delta.d_pos_d_bg
    Jj[6:9, POS] = Rit @ Rj
    return e, Ji, Jj


def lidar_residual(meas: LidarRelativePose, state_prev: NavState, state_cur: NavState, jacobians: bool = True):
    """``log(Z^-1 T_prev^-1 T_cur)`` and its 6x15 Jacobians (rotation-first tangent)."""
    Ti, Tj = state_prev.pose, state_cur.pose
    rel = compose(inverse(Ti), Tj)
    E = compose(inverse(meas.relative_transform), rel)
    e = se3_log(E)
    if not jacobians:
        return e
    Jr_inv = se3_right_jacobian_inv(e)
    Ji = np.zeros((6, STATE_DIM))
    Jj = np.zeros((6, STATE_DIM))
    Ji[:, 0:6] = -Jr_inv @ adjoint(inverse(rel))
    Jj[:, 0:6] = Jr_inv
    return e, Ji, Jj


def radar_residual(
    inp: RadarVelocityFactorInput, state: NavState, ext: Extrinsics
) -> tuple[float, np.ndarray]:
    """Forward-velocity error and its 1x15 Jacobian.

    Nonzero blocks are the ones w.r.t. rotation, velocity and gyro bias.
    """
    R_RI = np.asarray(ext.imu_to_radar_rotation, dtype=float)
    p_R = np.asarray(ext.radar_position_in_imu, dtype=float)
    R_IW = state.rotation.T
    v_body = R_IW @ state.velocity
    omega = np.asarray(inp.angular_velocity_at_node, dtype=float) - state.gyro_bias
    row = SELECT_X @ R_RI
    e = float(row @ (v_body + cross(omega, p_R)) - inp.forward_velocity)
    J = np.zeros((1, STATE_DIM))
    J[0, ROT] = row @ skew(v_body)
    J[0, VEL] = row @ R_IW
    J[0, BG] = row @ skew(p_R)
    return e, J


def state_local(anchor: NavState, state: NavState) -> np.ndarray:
    """Inverse of ``retract``: coordinates of ``state`` in the chart at ``anchor``."""
    R0 = anchor.rotation
    out = np.empty(STATE_DIM)
    out[ROT] = so3_log(R0.T @ state.rotation)
    out[POS] = R0.T @ (state.position - anchor.position)
    out[VEL] = state.velocity - anchor.velocity
    out[BA] = state.accel_bias - anchor.accel_bias
    out[BG] = state.gyro_bias - anchor.gyro_bias
    return out


def state_local_jacobian(anchor: NavState, state: NavState, local: np.ndarray) -> np.ndarray:
    J = _I15.copy()
    J[ROT, ROT] = so3_right_jacobian_inv(local[ROT])
    J[POS, POS] = anchor.rotation.T @ state.rotation
    return J


class Factor:
    keys: tuple[int, ...] = ()
    robust: bool = False
    row_robust: bool = False  # Huber on each residual row instead of the norm
    sqrt_info: np.ndarray
    kind: str = "factor"

    def linearize(self, states: list[NavState]) -> tuple[np.ndarray, list[np.ndarray]]:
        raise NotImplementedError

    def residual(self, states: list[NavState]) -> np.ndarray:
        return self.linearize(states)[0]

    def whitened(self, states: list[NavState]) -> np.ndarray:
        return self.sqrt_info @ self.residual(states)


def _stack(states: list[NavState]):
    return (
        np.array([s.rotation for s in states]),
        np.array([s.position for s in states]),
        np.array([s.velocity for s in states]),
        np.array([s.accel_bias for s in states]),
        np.array([s.gyro_bias for s in states]),
    )


def imu_residual_batch(factors: list[ImuFactor], states_i, states_j, jacobians: bool = True):
    """Vectorized :func:`imu_residual` over many factors; returns stacked arrays."""
    Ri, pi, vi, bai, bgi = _stack(states_i)
    Rj, pj, vj, _, _ = _stack(states_j)
    d = [f.delta for f in factors]
    T = np.array([x.duration for x in d])[:, None]
    g = np.array([f.gravity for f in factors])
    jac = np.array([x.bias_jacobians for x in d])
    db = np.concatenate([bai, bgi], axis=1) - np.array([x.bias_linearization_point for x in d])
    dba, dbg = db[:, :3], db[:, 3:]
    J_R_bg = jac[:, 0:3, 3:6]
    phi_b = np.einsum("nij,nj->ni", J_R_bg, dbg)
    dR = np.array([x.delta_rotation for x in d]) @ so3_exp_batch(phi_b)
    dv = np.array([x.delta_velocity for x in d]) + np.einsum("nij,nj->ni", jac[:, 3:6], db)
    dp = np.array([x.delta_position for x in d]) + np.einsum("nij,nj->ni", jac[:, 6:9], db)

    Rit = np.swapaxes(Ri, 1, 2)
    E = np.swapaxes(dR, 1, 2) @ Rit @ Rj
    e_R = so3_log_batch(E)
    u_v = np.einsum("nij,nj->ni", Rit, vj - vi - g * T)
    u_p = np.einsum("nij,nj->ni", Rit, pj - pi - vi * T - 0.5 * g * T * T)
    e = np.concatenate([e_R, u_v - dv, u_p - dp], axis=1)
    if not jacobians:
        return e

    n = len(factors)
    Jri = so3_right_jacobian_inv_batch(e_R)
    Ji = np.zeros((n, 9, STATE_DIM))
    Jj = np.zeros((n, 9, STATE_DIM))
    Ji[:, 0:3, ROT] = -Jri @ np.swapaxes(Rj, 1, 2) @ Ri
    Ji[:, 0:3, BG] = -Jri @ np.swapaxes(E, 1, 2) @ so3_right_jacobian_batch(phi_b) @ J_R_bg
    Jj[:, 0:3, ROT] = Jri
    Ji[:, 3:6, ROT] = skew_batch(u_v)
    Ji[:, 3:6, VEL] = -Rit
    Ji[:, 3:6, 9:15] = -jac[:, 3:6]
    Jj[:, 3:6, VEL] = Rit
    Ji[:, 6:9, ROT] = skew_batch(u_p)
    Ji[:, 6:9, POS] = -_I3
    Ji[:, 6:9, VEL] = -Rit * T[:, :, None]
    Ji[:, 6:9, 9:15] = -jac[:, 6:9]
    Jj[:, 6:9, POS] = Rit @ Rj
    return e, Ji, Jj


def lidar_residual_batch(factors: list[LidarFactor], states_prev, states_cur, jacobians: bool = True):
    """Vectorized :func:`lidar_residual`."""
    Ri, pi, _, _, _ = _stack(states_prev)
    Rj, pj, _, _, _ = _stack(states_cur)
    Rz = np.array([f.meas.relative_transform.rotation for f in factors])
    tz = np.array([f.meas.relative_transform.translation for f in factors])
    Rit = np.swapaxes(Ri, 1, 2)
    R_rel = Rit @ Rj
    t_rel = np.einsum("nij,nj->ni", Rit, pj - pi)
    Rzt = np.swapaxes(Rz, 1, 2)
    e = se3_log_batch(Rzt @ R_rel, np.einsum("nij,nj->ni", Rzt, t_rel - tz))
    if not jacobians:
        return e
    n = len(factors)
    Jr_inv = se3_right_jacobian_inv_batch(e)
    R_inv = np.swapaxes(R_rel, 1, 2)
    t_inv = -np.einsum("nij,nj->ni", R_inv, t_rel)
    Ad = np.zeros((n, 6, 6))
    Ad[:, :3, :3] = R_inv
    Ad[:, 3:, 3:] = R_inv
    Ad[:, 3:, :3] = skew_batch(t_inv) @ R_inv
    Ji = np.zeros((n, 6, STATE_DIM))
    Jj = np.zeros((n, 6, STATE_DIM))
    Ji[:, :, 0:6] = -Jr_inv @ Ad
    Jj[:, :, 0:6] = Jr_inv
    return e, Ji, Jj


class ImuFactor(Factor):
    kind = "imu"

    def __init__(self, key_i: int, key_j: int, delta: PreintegratedImuDelta, gravity):
        self.keys = (key_i, key_j)
        self.delta = delta
        self.gravity = np.asarray(gravity, dtype=float)
        self.sqrt_info = _sqrt_info_from_cov(delta.covariance)

    def linearize(self, states):
        e, Ji, Jj = imu_residual(self.delta, states[0], states[1], self.gravity)
        return e, [Ji, Jj]

    def residual(self, states):
        return imu_residual(self.delta, states[0], states[1], self.gravity, jacobians=False)

    @staticmethod
    def batch_linearize(factors, states_i, states_j, jacobians=True):
        return imu_residual_batch(factors, states_i, states_j, jacobians)


class BiasWalkFactor(Factor):
    kind = "bias"

    def __init__(self, key_i: int, key_j: int, dt: float, accel_walk: float, gyro_walk: float):
        self.keys = (key_i, key_j)
        sig = np.r_[np.full(3, accel_walk), np.full(3, gyro_walk)] * np.sqrt(max(dt, 1e-9))
        self.sqrt_info = np.diag(1.0 / sig)

    def residual(self, states):
        return states[1].bias - states[0].bias

    @staticmethod
    def batch_linearize(factors, states_i, states_j, jacobians=True):
        e = np.array([sj.bias - si.bias for si, sj in zip(states_i, states_j)])
        if not jacobians:
            return e
        n = len(factors)
        Ji = np.zeros((n, 6, STATE_DIM))
        Jj = np.zeros((n, 6, STATE_DIM))
        Ji[:, :, 9:15] = -_I6
        Jj[:, :, 9:15] = _I6
        return e, Ji, Jj

    def linearize(self, states):
        e = states[1].bias - states[0].bias
        Ji = np.zeros((6, STATE_DIM))
        Jj = np.zeros((6, STATE_DIM))
        Ji[:, 9:15] = -_I6
        Jj[:, 9:15] = _I6
        return e, [Ji, Jj]


class LidarFactor(Factor):
    kind = "lidar"
    robust = True
    row_robust = True

    def __init__(self, key_prev: int, key_cur: int, meas: LidarRelativePose):
        self.keys = (key_prev, key_cur)
        self.meas = meas
        self.sqrt_info = _sqrt_info_from_cov(meas.covariance)

    def linearize(self, states):
        e, Ji, Jj = lidar_residual(self.meas, states[0], states[1])
        return e, [Ji, Jj]

    def residual(self, states):
        return lidar_residual(self.meas, states[0], states[1], jacobians=False)

    @staticmethod
    def batch_linearize(factors, states_i, states_j, jacobians=True):
        return lidar_residual_batch(factors, states_i, states_j, jacobians)


class RadarFactor(Factor):
    """All radar forward-velocity measurements attached to one node.

    Rows are independent scalar residuals; the Huber loss applies per row.
    """

    kind = "radar"
    robust = True
    row_robust = True

    def __init__(self, key: int, inp: RadarVelocityFactorInput, ext: Extrinsics):
        self.keys = (key,)
        self.ext = ext
        self.inputs: list[RadarVelocityFactorInput] = []
        self.add(inp)

    def add(self, inp: RadarVelocityFactorInput) -> None:
        if inp.variance <= 0:
            raise ValueError("radar variance must be positive")
        self.inputs.append(inp)
        self._omega = np.array([np.asarray(i.angular_velocity_at_node, dtype=float) for i in self.inputs])
        self._meas = np.array([i.forward_velocity for i in self.inputs], dtype=float)
        self._inv_sigma = 1.0 / np.sqrt([i.variance for i in self.inputs])
        self.sqrt_info = np.diag(self._inv_sigma)

    @property
    def inp(self) -> RadarVelocityFactorInput:
        return self.inputs[0]

    def residual(self, states):
        st = states[0]
        row = SELECT_X @ np.asarray(self.ext.imu_to_radar_rotation, dtype=float)
        p_R = np.asarray(self.ext.radar_position_in_imu, dtype=float)
        v_body = st.rotation.T @ st.velocity
        # row . (w x p) = w . (p x row)
        lever = cross(p_R, row)
        return (row @ v_body) + (self._omega - st.gyro_bias) @ lever - self._meas

    def whitened(self, states):
        return self._inv_sigma * self.residual(states)

    def linearize(self, states):
        e = self.residual(states)
        _, J = radar_residual(self.inputs[0], states[0], self.ext)
        return e, [np.repeat(J, len(self.inputs), axis=0)]

    @staticmethod
    def batch_rows(factors, states, jacobians=True):
        """Stacked rows of many radar factors (one node each).

        Returns ``(e, J, owner, inv_sigma)`` where ``owner[k]`` indexes the
        factor of row ``k``; ``J`` is None when ``jacobians`` is False.
        """
        ext = factors[0].ext
        row = SELECT_X @ np.asarray(ext.imu_to_radar_rotation, dtype=float)
        p_R = np.asarray(ext.radar_position_in_imu, dtype=float)
        lever = cross(p_R, row)
        R, _, v, _, bg = _stack(states)
        v_body = np.einsum("nji,nj->ni", R, v)
        owner = np.concatenate([np.full(len(f.inputs), i) for i, f in enumerate(factors)])
        omega = np.concatenate([f._omega for f in factors])
        meas = np.concatenate([f._meas for f in factors])
        inv_sigma = np.concatenate([f._inv_sigma for f in factors])
        e = (v_body @ row)[owner] + (omega - bg[owner]) @ lever - meas
        if not jacobians:
            return e, None, owner, inv_sigma
        Jn = np.zeros((len(factors), STATE_DIM))
        Jn[:, ROT] = np.cross(row, v_body)
        Jn[:, VEL] = np.einsum("nij,j->ni", R, row)
        Jn[:, BG] = cross(row, p_R)
        return e, Jn, owner, inv_sigma


class PriorFactor(Factor):
    """Gaussian prior on a full node state, covariance in the node's tangent space."""

    kind = "prior"

    def __init__(self, key: int, mean: NavState, covariance: np.ndarray):
        self.keys = (key,)
        self.mean = mean
        self.sqrt_info = _sqrt_info_from_cov(covariance)

    def residual(self, states):
        return state_local(self.mean, states[0])

    def linearize(self, states):
        local = state_local(self.mean, states[0])
        return local, [state_local_jacobian(self.mean, states[0], local)]


class MarginalPrior(Factor):
    """Gaussian left behind by marginalization, frozen at its linearization point.

    The cost is ``0.5 d^T H d + g^T d`` with ``d`` the stacked chart
    coordinates of the keyed nodes relative to ``anchors``. It is stored in
    square-root form ``r = L^T d + c`` so it behaves like any other factor.
    """

    kind = "marginal"

    def __init__(self, keys, anchors: list[NavState], information: np.ndarray, gradient: np.ndarray):
        self.keys = tuple(keys)
        self.anchors = list(anchors)
        H = 0.5 * (information + information.T)
        w, U = np.linalg.eigh(H)
        keep = w > max(w.max(), 0.0) * 1e-14
        w, U = w[keep], U[:, keep]
        self.information = H
        self.gradient = np.asarray(gradient, dtype=float)
        self._Lt = np.sqrt(w)[:, None] * U.T
        self._c = (U.T @ self.gradient) / np.sqrt(w)
        self.sqrt_info = np.eye(len(w))

    def residual(self, states):
        d = np.concatenate([state_local(a, st) for a, st in zip(self.anchors, states)])
        return self._Lt @ d + self._c

    def whitened(self, states):
        return self.residual(states)

    def linearize(self, states):
        n = len(self.keys)
        d = np.empty(n * STATE_DIM)
        jacs = []
        for k, (anchor, st) in enumerate(zip(self.anchors, states)):
            local = state_local(anchor, st)
            d[k * STATE_DIM : (k + 1) * STATE_DIM] = local
            D = state_local_jacobian(anchor, st, local)
            jacs.append(self._Lt[:, k * STATE_DIM : (k + 1) * STATE_DIM] @ D)
        return self._Lt @ d + self._c, jacs

    def mean_offsets(self) -> np.ndarray:
        """Chart offsets from the anchors at the prior's minimum (least-squares)."""
        return -np.linalg.lstsq(self.information, self.gradient, rcond=None)[0]
