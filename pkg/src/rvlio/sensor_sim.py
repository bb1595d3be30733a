"""Deterministic ground truth and synthetic IMU, LiDAR-odometry and radar-beam streams.

Truth is planar: the vehicle stays level at a fixed height while its speed
and heading follow piecewise-constant longitudinal acceleration and yaw rate.
Positions come from closed-form integrals, so truth is exact at any time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from rvlio.estimator.types import Extrinsics, ImuMeasurement, LidarRelativePose
from rvlio.evaluation import TrajectoryRecord
from rvlio.geometry import Pose, compose, inverse, rot_z, se3_exp, so3_log
from rvlio.radar_dsp import (
    PIXEL_AZIMUTH_OFFSETS,
    PIXEL_ELEVATION_OFFSETS,
    BeamMeasurement,
    WaveformConfig,
)

GRAVITY = np.array([0.0, 0.0, -9.81])
PIXEL_WIDTH_DEG = 1.0
PIXEL_HEIGHT_DEG = 2.5
SMEAR_KERNEL = np.outer([0.5, 1.0, 0.5], [0.5, 1.0, 0.5])


@dataclass(frozen=True)
class Segment:
    duration: float
    accel: float = 0.0  # longitudinal, m/s^2
    yaw_rate: float = 0.0  # rad/s


@dataclass(frozen=True)
class TrajectoryProfile:
    segments: tuple[Segment, ...]
    initial_speed: float = 0.0
    initial_heading: float = 0.0
    initial_position: tuple[float, float] = (0.0, 0.0)
    height: float = 0.5  # IMU height above the ground plane, m

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise ValueError("profile needs at least one segment")
        if any(s.duration <= 0 for s in self.segments):
            raise ValueError("segment durations must be positive")
        _, speeds, _, _ = self._knots()
        if np.any(speeds < -1e-9):
            raise ValueError("profile drives the speed negative")

    @property
    def total_duration(self) -> float:
        return float(sum(s.duration for s in self.segments))

    def _knots(self):
        starts, speeds, headings, xy = [0.0], [self.initial_speed], [self.initial_heading], [self.initial_position]
        for s in self.segments:
            p, v, psi = _advance(np.array(xy[-1], dtype=float), speeds[-1], headings[-1], s, s.duration)
            starts.append(starts[-1] + s.duration)
            speeds.append(v)
            headings.append(psi)
            xy.append(p)
        return np.array(starts), np.array(speeds), np.array(headings), np.array(xy, dtype=float)

    def state_at(self, times) -> TruthSamples:
        """Exact pose, velocity, body rate and world acceleration at ``times``."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        starts, speeds, headings, xy = self._knots()
        k = np.clip(np.searchsorted(starts, times, side="right") - 1, 0, len(self.segments) - 1)
        n = times.size
        pos = np.zeros((n, 3))
        vel = np.zeros((n, 3))
        acc = np.zeros((n, 3))
        omega = np.zeros((n, 3))
        psi_out = np.zeros(n)
        for seg_idx in np.unique(k):
            sel = k == seg_idx
            seg = self.segments[seg_idx]
            tau = times[sel] - starts[seg_idx]
            p, s, psi = _advance(xy[seg_idx], speeds[seg_idx], headings[seg_idx], seg, tau)
            pos[sel, :2] = p
            c, sn = np.cos(psi), np.sin(psi)
            vel[sel, 0], vel[sel, 1] = s * c, s * sn
            acc[sel, 0] = seg.accel * c - s * seg.yaw_rate * sn
            acc[sel, 1] = seg.accel * sn + s * seg.yaw_rate * c
            omega[sel, 2] = seg.yaw_rate
            psi_out[sel] = psi
        pos[:, 2] = self.height
        rots = np.array([rot_z(p) for p in psi_out])
        return TruthSamples(times, rots, pos, vel, omega, acc)


def _advance(xy0, s0, psi0, seg: Segment, tau):
    """Closed-form planar state after ``tau`` seconds inside ``seg``."""
    tau = np.asarray(tau, dtype=float)
    a, r = seg.accel, seg.yaw_rate
    s = s0 + a * tau
    psi = psi0 + r * tau
    if abs(r) < 1e-6:
        dist = s0 * tau + 0.5 * a * tau * tau
        x = xy0[0] + dist * np.cos(psi0)
        y = xy0[1] + dist * np.sin(psi0)
    else:
        x = xy0[0] + (s * np.sin(psi) - s0 * np.sin(psi0)) / r + a * (np.cos(psi) - np.cos(psi0)) / r**2
        y = xy0[1] - (s * np.cos(psi) - s0 * np.cos(psi0)) / r + a * (np.sin(psi) - np.sin(psi0)) / r**2
    return np.stack([x, y], axis=-1), s, psi


@dataclass(frozen=True)
class TruthSamples:
    timestamps: np.ndarray
    rotations: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    angular_velocity: np.ndarray  # body frame
    acceleration: np.ndarray  # world frame

    def record(self) -> TrajectoryRecord:
        return TrajectoryRecord(self.timestamps, self.rotations, self.positions, self.velocities)


def desk_profile(duration: float = 60.0, static: float = 2.0, top_speed: float = 12.0) -> TrajectoryProfile:
    """Default desk-scale course: static start, accelerate, then loop with turns.

    Lateral accelerations stay below about 3 m/s^2.
    """
    accel = 2.0
    ramp = top_speed / accel
    segs = [Segment(static), Segment(ramp, accel=accel)]
    remaining = duration - static - ramp
    pattern = [
        Segment(4.0),
        Segment(6.0, yaw_rate=0.2),
        Segment(3.0, accel=-1.0),
        Segment(5.0, yaw_rate=-0.25),
        Segment(3.0, accel=1.0),
        Segment(4.0, yaw_rate=0.15),
    ]
    i = 0
    while remaining > 1e-9:
        s = pattern[i % len(pattern)]
        d = min(s.duration, remaining)
        segs.append(Segment(d, s.accel, s.yaw_rate))
        remaining -= d
        i += 1
    return TrajectoryProfile(tuple(segs))


def generate_truth(profile: TrajectoryProfile, rate: float) -> TruthSamples:
    """Sample the profile on a uniform grid ``[0, total_duration]``."""
    n = int(np.floor(profile.total_duration * rate + 1e-9)) + 1
    return profile.state_at(np.arange(n) / rate)


@dataclass(frozen=True)
class ImuErrorModel:
    gyro_noise: float = 1e-3  # rad/s/sqrt(Hz)
    accel_noise: float = 1e-2  # m/s^2/sqrt(Hz)
    gyro_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    accel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gyro_bias_walk: float = 0.0  # rad/s/sqrt(s)
    accel_bias_walk: float = 0.0  # m/s^2/sqrt(s)


def simulate_imu(
    profile: TrajectoryProfile,
    rate: float = 400.0,
    errors: ImuErrorModel = ImuErrorModel(),
    seed: int = 0,
    gravity: np.ndarray = GRAVITY,
) -> list[ImuMeasurement]:
    """IMU samples whose zero-order-hold integration reproduces truth.

    Sample ``k`` carries the mean rate and specific force over ``[t_k, t_k+1]``,
    so Euler re-integration of a noise-free stream matches truth velocity and
    attitude at every sample time up to round-off.
    """
    truth = generate_truth(profile, rate)
    rng = np.random.default_rng(seed)
    ts, R, v = truth.timestamps, truth.rotations, truth.velocities
    dt = np.diff(ts)
    n = len(ts) - 1
    omega = np.array([so3_log(R[k].T @ R[k + 1]) / dt[k] for k in range(n)])
    dv = (v[1:] - v[:-1]) / dt[:, None] - gravity
    force = np.einsum("nji,nj->ni", R[:-1], dv)

    def walk(sigma):
        steps = rng.standard_normal((n, 3)) * sigma * np.sqrt(dt)[:, None]
        return np.cumsum(steps, axis=0) - steps

    bg = np.asarray(errors.gyro_bias) + walk(errors.gyro_bias_walk)
    ba = np.asarray(errors.accel_bias) + walk(errors.accel_bias_walk)
    gyro = omega + bg + rng.standard_normal((n, 3)) * errors.gyro_noise / np.sqrt(dt)[:, None]
    acc = force + ba + rng.standard_normal((n, 3)) * errors.accel_noise / np.sqrt(dt)[:, None]
    return [ImuMeasurement(gyro[k], acc[k], float(ts[k])) for k in range(n)]


@dataclass(frozen=True)
class DropoutSchedule:
    windows: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        w = tuple(sorted((float(a), float(b)) for a, b in self.windows))
        for a, b in w:
            if b <= a:
                raise ValueError(f"dropout window ({a}, {b}) is empty or inverted")
        for (_, b0), (a1, _) in zip(w, w[1:]):
            if a1 < b0:
                raise ValueError("dropout windows overlap")
        object.__setattr__(self, "windows", w)

    def validate_for(self, duration: float) -> None:
        if any(a < 0 or b > duration + 1e-9 for a, b in self.windows):
            raise ValueError("dropout window outside the trajectory")

    def active(self, t: float) -> bool:
        """True when ``t`` falls in a half-open window ``[start, end)``."""
        return any(a - 1e-9 <= t < b - 1e-9 for a, b in self.windows)


def simulate_lidar_odometry(
    profile: TrajectoryProfile,
    rate: float = 10.0,
    sigma_position: float = 0.02,
    sigma_rotation: float = 0.005,
    schedule: DropoutSchedule = DropoutSchedule(),
    seed: int = 0,
) -> list[LidarRelativePose]:
    """Relative IMU-frame motion between consecutive scans, with tangent noise.

    Noise is drawn for every scan pair (including dropped ones), so a
    dropout schedule does not change the measurements that remain.
    """
    schedule.validate_for(profile.total_duration)
    truth = generate_truth(profile, rate)
    rng = np.random.default_rng(seed)
    cov = np.diag(np.r_[np.full(3, sigma_rotation**2), np.full(3, sigma_position**2)])
    out = []
    for j in range(1, len(truth.timestamps)):
        Ti = Pose(truth.rotations[j - 1], truth.positions[j - 1])
        Tj = Pose(truth.rotations[j], truth.positions[j])
        noise = np.r_[rng.standard_normal(3) * sigma_rotation, rng.standard_normal(3) * sigma_position]
        t_cur = float(truth.timestamps[j])
        if schedule.active(t_cur):
            continue
        rel = compose(compose(inverse(Ti), Tj), se3_exp(noise))
        out.append(LidarRelativePose(rel, cov, float(truth.timestamps[j - 1]), t_cur))
    return out


@dataclass(frozen=True)
class SceneModel:
    """Static world: point targets plus a flat ground plane at ``ground_height``."""

    targets: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    reflectivity: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ground_points_per_pixel: int = 24
    ground_power: float = 400.0  # per pixel at 10 m, linear
    noise_power: float = 1.0
    ground_height: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.targets, dtype=float).reshape(-1, 3)
        r = np.asarray(self.reflectivity, dtype=float).reshape(-1)
        if r.size != t.shape[0]:
            raise ValueError("one reflectivity per target required")
        if np.any(r <= 0):
            raise ValueError("reflectivities must be positive")
        if self.noise_power <= 0:
            raise ValueError("noise power must be positive")
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "reflectivity", r)


def random_scene(seed: int = 0, extent: float = 400.0, n_targets: int = 400, power: float = 2000.0) -> SceneModel:
    """Low posts scattered over a square around the origin."""
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-extent / 2, extent / 2, size=(n_targets, 2))
    z = rng.uniform(0.2, 1.5, size=n_targets)
    return SceneModel(np.column_stack([xy, z]), np.full(n_targets, power))


class NoiseBank:
    """Pre-drawn exponential noise maps reused through random circular shifts.

    Each pixel of a beam gets a distinct bank map with an independent shift
    along both axes; it trades noise independence across beams for speed.
    Maps are stored periodically tiled so that a shifted map is a plain slice.
    """

    def __init__(self, waveform: WaveformConfig, noise_power: float, n_maps: int = 48, seed: int = 0):
        if n_maps < 12:
            raise ValueError("noise bank needs at least 12 maps")
        rng = np.random.default_rng(seed)
        self.shape = waveform.shape
        base = rng.exponential(noise_power, size=(n_maps, *waveform.shape))
        self.tiled = np.tile(base, (1, 2, 2))

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        nr, nd = self.shape
        idx = rng.choice(self.tiled.shape[0], size=12, replace=False)
        sr = rng.integers(nr, size=12)
        sd = rng.integers(nd, size=12)
        out = np.empty((12, nr, nd))
        for k in range(12):
            out[k] = self.tiled[idx[k], sr[k] : sr[k] + nr, sd[k] : sd[k] + nd]
        return out


def _directions(az_deg, el_deg) -> np.ndarray:
    az, el = np.deg2rad(az_deg), np.deg2rad(el_deg)
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def radar_velocity(rotation, velocity, angular_velocity, ext: Extrinsics) -> np.ndarray:
    """Radar-frame velocity of the radar origin (body rate in the IMU frame)."""
    v_body = np.asarray(rotation).T @ np.asarray(velocity)
    return ext.imu_to_radar_rotation @ (v_body + np.cross(angular_velocity, ext.radar_position_in_imu))


def _deposit(pixels, k, rng_m, vd, power, wf: WaveformConfig):
    """Add ``power`` at (range, doppler) with the 3x3 smear kernel, clipped at borders."""
    nr, nd = wf.shape
    row = np.rint(rng_m / wf.range_resolution).astype(int)
    col = np.rint((vd + wf.max_doppler) / wf.doppler_resolution).astype(int)
    keep = (rng_m <= wf.max_range) & (row >= 0) & (row < nr) & (col >= 0) & (col < nd)
    k, row, col, power = k[keep], row[keep], col[keep], power[keep]
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r, c = row + dr, col + dc
            ok = (r >= 0) & (r < nr) & (c >= 0) & (c < nd)
            np.add.at(pixels, (k[ok], r[ok], c[ok]), power[ok] * SMEAR_KERNEL[dr + 1, dc + 1])


def simulate_radar_beam(
    state: TruthSamples,
    scene: SceneModel,
    waveform: WaveformConfig,
    azimuth: float,
    elevation: float,
    rng: np.random.Generator,
    extrinsics: Extrinsics = Extrinsics(),
    noise_bank: NoiseBank | None = None,
    index: int = 0,
) -> BeamMeasurement:
    """Synthesize the 12 pixel RD maps of one beam from the truth sample ``index``.

    Every return lands at the doppler of its own bearing, ``v_d = -r^T v``
    with ``v`` the radar-frame velocity.
    """
    R_WI = state.rotations[index]
    p_WI = state.positions[index]
    R_RI = np.asarray(extrinsics.imu_to_radar_rotation)
    R_WR = R_WI @ R_RI.T
    p_WR = p_WI + R_WI @ np.asarray(extrinsics.radar_position_in_imu)
    v_R = radar_velocity(R_WI, state.velocities[index], state.angular_velocity[index], extrinsics)

    if noise_bank is not None:
        pixels = noise_bank.draw(rng)
    else:
        pixels = rng.exponential(scene.noise_power, size=(12, *waveform.shape))

    pix = np.arange(12)
    pix_az = azimuth + PIXEL_AZIMUTH_OFFSETS[pix % 4]
    pix_el = elevation + PIXEL_ELEVATION_OFFSETS[pix // 4]

    # ground: sample bearings inside each pixel cone, keep those that hit the plane
    m = scene.ground_points_per_pixel
    if m > 0:
        az = pix_az[:, None] + rng.uniform(-0.5, 0.5, (12, m)) * PIXEL_WIDTH_DEG
        el = pix_el[:, None] + rng.uniform(-0.5, 0.5, (12, m)) * PIXEL_HEIGHT_DEG
        d_R = _directions(az, el)
        d_W = d_R @ R_WR.T
        dz = d_W[..., 2]
        height = p_WR[2] - scene.ground_height
        hit = dz < -1e-6
        rng_m = np.where(hit, height / np.where(hit, -dz, 1.0), np.inf)
        vd = -(d_R @ v_R)
        power = scene.ground_power * (10.0 / np.maximum(rng_m, 1.0)) ** 2 / m
        kk = np.broadcast_to(pix[:, None], (12, m))
        sel = hit & np.isfinite(rng_m)
        _deposit(pixels, kk[sel], rng_m[sel], vd[sel], power[sel], waveform)

    if scene.targets.shape[0]:
        rel_W = scene.targets - p_WR
        dist = np.linalg.norm(rel_W, axis=1)
        near = (dist > 1e-6) & (dist <= waveform.max_range)
        if np.any(near):
            rel_R = rel_W[near] @ R_WR
            u = rel_R / dist[near, None]
            t_az = np.rad2deg(np.arctan2(u[:, 1], u[:, 0]))
            t_el = np.rad2deg(np.arcsin(np.clip(u[:, 2], -1, 1)))
            in_az = np.abs(t_az[None, :] - pix_az[:, None]) <= 0.5 * PIXEL_WIDTH_DEG
            in_el = np.abs(t_el[None, :] - pix_el[:, None]) <= 0.5 * PIXEL_HEIGHT_DEG
            kk, tt = np.nonzero(in_az & in_el)
            if kk.size:
                vd = -(u[tt] @ v_R)
                power = scene.reflectivity[near][tt] * (10.0 / np.maximum(dist[near][tt], 1.0)) ** 2
                _deposit(pixels, kk, dist[near][tt], vd, power, waveform)

    return BeamMeasurement(pixels, waveform, azimuth, elevation, float(state.timestamps[index]))


@dataclass(frozen=True)
class SweepPattern:
    """Beam centres cycled in ascending azimuth at a fixed elevation."""

    azimuths: tuple[float, ...] = tuple(np.arange(-38.0, 38.1, 4.0).tolist())
    elevation: float = -2.5

    def __post_init__(self):
        if not self.azimuths:
            raise ValueError("sweep pattern needs at least one azimuth")

    def period(self, waveform: WaveformConfig) -> float:
        return len(self.azimuths) * waveform.beam_sampling_time


def beam_times(duration: float, waveform: WaveformConfig, t0: float = 0.0) -> np.ndarray:
    n = int(np.floor((duration - t0) / waveform.beam_sampling_time + 1e-9)) + 1
    return t0 + np.arange(n) * waveform.beam_sampling_time


def sweep_beams(
    profile: TrajectoryProfile,
    scene: SceneModel,
    pattern: SweepPattern,
    waveform: WaveformConfig,
    seed: int = 0,
    extrinsics: Extrinsics = Extrinsics(),
    noise_bank: NoiseBank | None = None,
    t0: float = 0.0,
    duration: float | None = None,
) -> Iterator[BeamMeasurement]:
    """Yield beams every ``beam_sampling_time`` seconds, cycling the pattern."""
    duration = profile.total_duration if duration is None else duration
    times = beam_times(duration, waveform, t0)
    truth = profile.state_at(times)
    rng = np.random.default_rng(seed)
    for i in range(len(times)):
        az = pattern.azimuths[i % len(pattern.azimuths)]
        yield simulate_radar_beam(truth, scene, waveform, az, pattern.elevation, rng, extrinsics, noise_bank, i)
