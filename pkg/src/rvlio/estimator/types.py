from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from rvlio.geometry import Pose, so3_exp

STATE_DIM = 15
# per-node tangent layout
ROT, POS, VEL, BA, BG = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)


@dataclass(frozen=True)
class NavState:
    """IMU pose in world, world-frame velocity and IMU biases at one instant."""

    pose: Pose
    velocity: np.ndarray
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0

    def __post_init__(self):
        for name in ("velocity", "accel_bias", "gyro_bias"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def rotation(self) -> np.ndarray:
        return self.pose.rotation

    @property
    def position(self) -> np.ndarray:
        return self.pose.translation

    @property
    def bias(self) -> np.ndarray:
        return np.concatenate([self.accel_bias, self.gyro_bias])

    def retract(self, delta: np.ndarray) -> NavState:
        """Apply a 15-vector ``[dtheta, dp, dv, dba, dbg]``.

        Rotation and position are perturbed in the body frame
        (``R exp(dtheta)``, ``p + R dp``); the rest additively.
        """
        R = self.pose.rotation
        return replace(
            self,
            pose=Pose(R @ so3_exp(delta[ROT]), self.pose.translation + R @ delta[POS]),
            velocity=self.velocity + delta[VEL],
            accel_bias=self.accel_bias + delta[BA],
            gyro_bias=self.gyro_bias + delta[BG],
        )


@dataclass(frozen=True)
class ImuMeasurement:
    angular_velocity: np.ndarray
    specific_force: np.ndarray
    timestamp: float


@dataclass(frozen=True)
class LidarRelativePose:
    """Relative IMU-frame motion between two scan times, already through the extrinsics."""

    relative_transform: Pose
    covariance: np.ndarray
    t_prev: float
    t_cur: float

    @property
    def timestamp(self) -> float:
        return self.t_cur


@dataclass(frozen=True)
class RadarVelocityFactorInput:
    forward_velocity: float
    variance: float
    angular_velocity_at_node: np.ndarray
    timestamp: float


@dataclass(frozen=True)
class Extrinsics:
    """``imu_to_radar_rotation`` is R_RI; ``radar_position_in_imu`` is p_R in the IMU frame."""

    imu_to_radar_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    radar_position_in_imu: np.ndarray = field(default_factory=lambda: np.zeros(3))
    lidar_to_imu: Pose = field(default_factory=Pose.identity)


class StaleMeasurement(ValueError):
    """Measurement references a time already marginalized out of the window."""
