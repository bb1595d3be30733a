"""Event-driven fixed-lag smoother over IMU, LiDAR odometry and radar streams."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from rvlio.geometry import Pose, compose, inverse
from rvlio.radar_dsp import DopplerMeasurement, doppler_to_forward_velocity

from .factors import BiasWalkFactor, ImuFactor, LidarFactor, PriorFactor, RadarFactor
from .initialization import static_initialize
from .preintegration import ImuNoise, preintegrate
from .types import (
    Extrinsics,
    ImuMeasurement,
    LidarRelativePose,
    NavState,
    RadarVelocityFactorInput,
    StaleMeasurement,
)
from .window import FactorGraphWindow

log = logging.getLogger(__name__)

MODALITIES = {"LI": ("lidar",), "RI": ("radar",), "LRI": ("lidar", "radar")}


@dataclass(frozen=True)
class EstimatorConfig:
    lag: float = 1.5
    node_rate: float = 100.0
    imu_noise: ImuNoise = ImuNoise()
    lidar_sigma_position: float = 0.02
    lidar_sigma_rotation: float = 0.005
    radar_sigma: float = 0.169
    huber_delta: float | None = 1.345
    init_duration: float = 1.0
    max_iterations: int = 50
    step_tolerance: float = 1e-8
    cost_tolerance: float = 1e-6
    # initial prior, tangent order (rotation, position, velocity, accel bias, gyro bias)
    prior_sigma_roll_pitch: float = 0.01
    prior_sigma_yaw: float = 1e-4
    prior_sigma_position: float = 1e-3
    prior_sigma_velocity: float = 0.01
    prior_sigma_accel_bias: float = 0.1
    prior_sigma_gyro_bias: float = 1e-3

    def lidar_covariance(self) -> np.ndarray:
        return np.diag(
            np.r_[np.full(3, self.lidar_sigma_rotation**2), np.full(3, self.lidar_sigma_position**2)]
        )

    def initial_covariance(self) -> np.ndarray:
        sig = np.r_[
            self.prior_sigma_roll_pitch,
            self.prior_sigma_roll_pitch,
            self.prior_sigma_yaw,
            np.full(3, self.prior_sigma_position),
            np.full(3, self.prior_sigma_velocity),
            np.full(3, self.prior_sigma_accel_bias),
            np.full(3, self.prior_sigma_gyro_bias),
        ]
        return np.diag(sig**2)


@dataclass
class IngestStats:
    nodes: int = 0
    imu_factors: int = 0
    lidar_factors: int = 0
    radar_factors: int = 0
    stale: int = 0
    not_converged: int = 0
    iterations: int = 0
    cost_increases: int = 0
    notes: list[str] = field(default_factory=list)


def _check_sorted(times, name: str) -> None:
    t = np.asarray(times, dtype=float)
    if t.size > 1 and np.any(np.diff(t) < 0):
        raise ValueError(f"{name} stream is not sorted by timestamp")


def _radar_forward(m) -> tuple[float, float]:
    if isinstance(m, DopplerMeasurement):
        return m.timestamp, doppler_to_forward_velocity(m)
    return m.timestamp, float(m.forward_velocity)


def _chain(out_prev: NavState, prev: NavState, cur: NavState) -> NavState:
    """Append the solve's own prev-to-cur motion to the previous odometry output."""
    pose = compose(out_prev.pose, compose(inverse(prev.pose), cur.pose))
    velocity = pose.rotation @ (cur.rotation.T @ cur.velocity)
    return replace(cur, pose=pose, velocity=velocity)


class FixedLagSmoother:
    """Owns one :class:`FactorGraphWindow` and feeds it sensor streams in time order.

    Besides the newest state after each update, :attr:`odometry` holds an
    output stream built by chaining each update's estimate of the newest
    relative motion. Absolute position and yaw are only held by the prior, so
    each solve may shift the whole window slightly; the chained stream keeps
    those frame revisions out of the local motion it reports.
    """

    def __init__(
        self,
        config: EstimatorConfig = EstimatorConfig(),
        extrinsics: Extrinsics = Extrinsics(),
        modalities: str | tuple[str, ...] = "LRI",
    ):
        self.config = config
        self.extrinsics = extrinsics
        self.use = MODALITIES[modalities] if isinstance(modalities, str) else tuple(modalities)
        self.window = FactorGraphWindow(lag=config.lag, huber_delta=config.huber_delta)
        self.stats = IngestStats()
        self.gravity = np.array([0.0, 0.0, -9.81])
        self._node_imu: dict[int, int] = {}
        self._radar_at: dict[int, RadarFactor] = {}
        self.odometry: list[NavState] = []

    def _initial_state(self, imu: list[ImuMeasurement], t_node: float) -> NavState:
        align = static_initialize(imu, self.config.init_duration)
        self.gravity = np.array([0.0, 0.0, -align.gravity_magnitude])
        self.alignment = align
        return NavState(
            pose=Pose(align.rotation, np.zeros(3)),
            velocity=np.zeros(3),
            accel_bias=np.zeros(3),
            gyro_bias=align.gyro_bias,
            timestamp=t_node,
        )

    def _predict(self, state: NavState, delta, t: float) -> NavState:
        dR, dv, dp = delta.corrected(state.bias)
        R, v, p = state.rotation, state.velocity, state.position
        T = delta.duration
        return replace(
            state,
            pose=Pose(R @ dR, p + v * T + 0.5 * self.gravity * T * T + R @ dp),
            velocity=v + self.gravity * T + R @ dv,
            timestamp=t,
        )

    def add_node_and_attach(self, imu_segment, t_start: float, t_end: float, imu_index: int) -> int:
        """Close the IMU interval ending at ``t_end`` with a new node and its IMU factors."""
        w = self.window
        prev = w.newest
        delta = preintegrate(
            imu_segment, w.states[prev].bias, t_start=t_start, t_end=t_end, noise=self.config.imu_noise
        )
        key = w.add_node(self._predict(w.states[prev], delta, t_end))
        self._node_imu[key] = imu_index
        w.add_factor(ImuFactor(prev, key, delta, self.gravity))
        n = self.config.imu_noise
        w.add_factor(BiasWalkFactor(prev, key, delta.duration, n.accel_bias_walk, n.gyro_bias_walk))
        self.stats.imu_factors += 1
        self.stats.nodes += 1
        return key

    def attach_radar(self, t: float, forward_velocity: float, imu: list[ImuMeasurement]) -> int:
        key = self.window.nearest_node(t)
        omega = imu[self._node_imu[key]].angular_velocity
        inp = RadarVelocityFactorInput(forward_velocity, self.config.radar_sigma**2, omega, t)
        existing = self._radar_at.get(key)
        if existing is not None and existing in self.window.factors:
            existing.add(inp)
        else:
            factor = RadarFactor(key, inp, self.extrinsics)
            self.window.add_factor(factor)
            self._radar_at[key] = factor
        self.stats.radar_factors += 1
        return key

    def attach_lidar(self, meas: LidarRelativePose) -> tuple[int, int]:
        w = self.window
        k_prev = w.nearest_node(meas.t_prev)
        k_cur = w.nearest_node(meas.t_cur)
        if k_prev == k_cur:
            raise StaleMeasurement("LiDAR interval collapses onto a single node")
        if meas.covariance is None:
            meas = replace(meas, covariance=self.config.lidar_covariance())
        w.add_factor(LidarFactor(k_prev, k_cur, meas))
        self.stats.lidar_factors += 1
        return k_prev, k_cur

    def ingest(
        self,
        imu: list[ImuMeasurement],
        lidar: list[LidarRelativePose] = (),
        radar: list = (),
    ) -> list[NavState]:
        """Replay sensor streams; returns the newest node estimate after each update."""
        cfg = self.config
        _check_sorted([m.timestamp for m in imu], "IMU")
        _check_sorted([m.t_cur for m in lidar], "LiDAR")
        _check_sorted([m.timestamp for m in radar], "radar")
        lidar = list(lidar) if "lidar" in self.use else []
        radar = [_radar_forward(m) for m in radar] if "radar" in self.use else []

        ts = np.array([m.timestamp for m in imu])
        if len(ts) < 2:
            raise ValueError("need at least two IMU samples")
        imu_dt = float(np.median(np.diff(ts)))
        stride = max(1, int(round(1.0 / (cfg.node_rate * imu_dt))))
        first = int(np.searchsorted(ts, ts[0] + cfg.init_duration - 1e-9))
        if first >= len(ts):
            raise ValueError("IMU stream shorter than the initialization window")

        w = self.window
        x0 = self._initial_state(imu[:first], float(ts[first]))
        k0 = w.add_node(x0)
        self._node_imu[k0] = first
        w.add_factor(PriorFactor(k0, x0, cfg.initial_covariance()))
        self.stats.nodes += 1

        estimates = [x0]
        self.odometry = [x0]
        li = ri = 0
        # measurements before the first node cannot be placed
        while li < len(lidar) and lidar[li].t_prev < ts[first] - 0.5 * stride * imu_dt:
            li += 1
            self.stats.stale += 1
        while ri < len(radar) and radar[ri][0] < ts[first] - 0.5 * stride * imu_dt:
            ri += 1
            self.stats.stale += 1

        prev_idx = first
        for idx in range(first + stride, len(ts), stride):
            self.add_node_and_attach(imu[prev_idx:idx], float(ts[prev_idx]), float(ts[idx]), idx)
            prev_idx = idx
            t_now = float(ts[idx])
            while ri < len(radar) and radar[ri][0] <= t_now:
                try:
                    self.attach_radar(radar[ri][0], radar[ri][1], imu)
                except StaleMeasurement:
                    self.stats.stale += 1
                ri += 1
            while li < len(lidar) and lidar[li].t_cur <= t_now:
                try:
                    self.attach_lidar(lidar[li])
                except StaleMeasurement:
                    self.stats.stale += 1
                li += 1

            result = w.optimize(cfg.max_iterations, cfg.step_tolerance, cfg.cost_tolerance)
            self.stats.iterations += result.iterations
            if not result.converged:
                self.stats.not_converged += 1
            if any(b > a for a, b in zip(result.costs, result.costs[1:])):
                self.stats.cost_increases += 1
            self.odometry.append(_chain(self.odometry[-1], w.states[w.node_ids[-2]], w.states[w.newest]))
            w.marginalize_old()
            estimates.append(w.states[w.newest])
        return estimates
