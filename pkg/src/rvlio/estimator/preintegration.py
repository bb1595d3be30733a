"""On-manifold IMU preintegration with bias Jacobians and noise propagation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rvlio.geometry import skew, so3_exp, so3_right_jacobian

from .types import ImuMeasurement


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time densities: gyro rad/s/sqrt(Hz), accel m/s^2/sqrt(Hz), bias walks per sqrt(s)."""

    gyro: float = 1e-3
    accel: float = 1e-2
    gyro_bias_walk: float = 1e-5
    accel_bias_walk: float = 1e-4


@dataclass(frozen=True)
class PreintegratedImuDelta:
    delta_rotation: np.ndarray
    delta_velocity: np.ndarray
    delta_position: np.ndarray
    duration: float
    covariance: np.ndarray  # 9x9, blocks (rotation, velocity, position)
    bias_jacobians: np.ndarray  # 9x6, columns (accel bias, gyro bias)
    bias_linearization_point: np.ndarray  # [b_a, b_g]
    measurements: tuple = field(default=(), repr=False)

    @property
    def d_rot_d_bg(self) -> np.ndarray:
        return self.bias_jacobians[0:3, 3:6]

    @property
    def d_vel_d_ba(self) -> np.ndarray:
        return self.bias_jacobians[3:6, 0:3]

    @property
    def d_vel_d_bg(self) -> np.ndarray:
        return self.bias_jacobians[3:6, 3:6]

    @property
    def d_pos_d_ba(self) -> np.ndarray:
        return self.bias_jacobians[6:9, 0:3]

    @property
    def d_pos_d_bg(self) -> np.ndarray:
        return self.bias_jacobians[6:9, 3:6]

    def corrected(self, bias: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """First-order bias update of the deltas: (dR, dv, dp)."""
        db = np.asarray(bias, dtype=float) - self.bias_linearization_point
        dba, dbg = db[:3], db[3:]
        dR = self.delta_rotation @ so3_exp(self.d_rot_d_bg @ dbg)
        dv = self.delta_velocity + self.d_vel_d_ba @ dba + self.d_vel_d_bg @ dbg
        dp = self.delta_position + self.d_pos_d_ba @ dba + self.d_pos_d_bg @ dbg
        return dR, dv, dp


def preintegrate(
    measurements: list[ImuMeasurement],
    bias,
    t_start: float | None = None,
    t_end: float | None = None,
    noise: ImuNoise = ImuNoise(),
) -> PreintegratedImuDelta:
    """Integrate bias-corrected IMU samples over ``[t_start, t_end]``.

    Each sample is held constant until the next sample (or ``t_end``). With
    ``t_end`` omitted the last sample is held for the previous sample spacing.
    """
    if not measurements:
        raise ValueError("cannot preintegrate an empty interval")
    ts = np.array([m.timestamp for m in measurements], dtype=float)
    if np.any(np.diff(ts) <= 0):
        raise ValueError("IMU timestamps must be strictly increasing")
    if t_start is None:
        t_start = ts[0]
    if t_end is None:
        if len(ts) < 2:
            raise ValueError("t_end is required for a single IMU sample")
        t_end = ts[-1] + (ts[-1] - ts[-2])
    if t_end <= t_start:
        raise ValueError("empty preintegration interval")

    bias = np.asarray(bias, dtype=float)
    ba, bg = bias[:3], bias[3:]
    bounds = np.concatenate([[t_start], ts[1:], [t_end]])
    bounds = np.clip(bounds, t_start, t_end)

    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    cov = np.zeros((9, 9))
    J_R_bg = np.zeros((3, 3))
    J_v_ba = np.zeros((3, 3))
    J_v_bg = np.zeros((3, 3))
    J_p_ba = np.zeros((3, 3))
    J_p_bg = np.zeros((3, 3))
    A = np.eye(9)
    B = np.zeros((9, 6))
    for k, m in enumerate(measurements):
        dt = bounds[k + 1] - bounds[k]
        if dt <= 0:
            continue
        w = np.asarray(m.angular_velocity, dtype=float) - bg
        a = np.asarray(m.specific_force, dtype=float) - ba
        dR_k = so3_exp(w * dt)
        Jr = so3_right_jacobian(w * dt)
        Ra = dR @ skew(a)

        # noise propagation, state order (rotation, velocity, position)
        A[:] = np.eye(9)
        A[0:3, 0:3] = dR_k.T
        A[3:6, 0:3] = -Ra * dt
        A[6:9, 0:3] = -0.5 * Ra * dt * dt
        A[6:9, 3:6] = np.eye(3) * dt
        B[:] = 0.0
        B[0:3, 0:3] = Jr * dt
        B[3:6, 3:6] = dR * dt
        B[6:9, 3:6] = 0.5 * dR * dt * dt
        Qd = np.diag(np.r_[np.full(3, noise.gyro**2 / dt), np.full(3, noise.accel**2 / dt)])
        cov = A @ cov @ A.T + B @ Qd @ B.T

        # bias Jacobians use the pre-update rotation/velocity terms
        J_p_ba += J_v_ba * dt - 0.5 * dR * dt * dt
        J_p_bg += J_v_bg * dt - 0.5 * Ra @ J_R_bg * dt * dt
        J_v_ba -= dR * dt
        J_v_bg -= Ra @ J_R_bg * dt
        J_R_bg = dR_k.T @ J_R_bg - Jr * dt

        dp = dp + dv * dt + 0.5 * (dR @ a) * dt * dt
        dv = dv + (dR @ a) * dt
        dR = dR @ dR_k

    jac = np.zeros((9, 6))
    jac[0:3, 3:6] = J_R_bg
    jac[3:6, 0:3] = J_v_ba
    jac[3:6, 3:6] = J_v_bg
    jac[6:9, 0:3] = J_p_ba
    jac[6:9, 3:6] = J_p_bg
    return PreintegratedImuDelta(
        delta_rotation=dR,
        delta_velocity=dv,
        delta_position=dp,
        duration=float(t_end - t_start),
        covariance=0.5 * (cov + cov.T),
        bias_jacobians=jac,
        bias_linearization_point=bias.copy(),
        measurements=tuple(measurements),
    )
