from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rvlio.geometry import from_rpy

from .types import ImuMeasurement


class NonStaticStart(ValueError):
    """IMU excitation during the alignment window exceeded the static gate."""


@dataclass(frozen=True)
class StaticAlignment:
    rotation: np.ndarray  # world-from-IMU, yaw fixed to zero
    roll: float
    pitch: float
    gravity_magnitude: float
    gyro_bias: np.ndarray
    end_time: float


def static_initialize(
    imu_buffer: list[ImuMeasurement],
    duration: float = 1.0,
    max_gyro_std: float = 0.1,
    max_accel_std: float = 1.0,
) -> StaticAlignment:
    """Roll/pitch, gravity magnitude and gyro bias from a static IMU segment.

    Uses the samples in the first ``duration`` seconds of the buffer. The mean
    specific force is aligned with world up; yaw is unobservable and set to 0.
    """
    if not imu_buffer:
        raise ValueError("empty IMU buffer")
    ts = np.array([m.timestamp for m in imu_buffer])
    if np.any(np.diff(ts) <= 0):
        raise ValueError("IMU timestamps must be strictly increasing")
    dt = float(np.median(np.diff(ts))) if len(ts) > 1 else 0.0
    if ts[-1] - ts[0] + dt < duration * (1 - 1e-9):
        raise ValueError(f"static buffer spans {ts[-1] - ts[0] + dt:.3f} s < {duration} s")
    sel = ts < ts[0] + duration - 1e-9
    gyro = np.array([m.angular_velocity for m, s in zip(imu_buffer, sel) if s], dtype=float)
    force = np.array([m.specific_force for m, s in zip(imu_buffer, sel) if s], dtype=float)

    if np.any(gyro.std(axis=0) > max_gyro_std) or np.any(force.std(axis=0) > max_accel_std):
        raise NonStaticStart("IMU variance above the static gate; platform is moving")

    f = force.mean(axis=0)
    roll = float(np.arctan2(f[1], f[2]))
    pitch = float(np.arctan2(-f[0], np.hypot(f[1], f[2])))
    return StaticAlignment(
        rotation=from_rpy(roll, pitch, 0.0),
        roll=roll,
        pitch=pitch,
        gravity_magnitude=float(np.linalg.norm(force, axis=1).mean()),
        gyro_bias=gyro.mean(axis=0),
        end_time=float(ts[sel][-1]),
    )
