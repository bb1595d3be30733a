"""Trajectory containers and error metrics (relative pose error, velocity error)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rvlio.geometry import Pose, compose, inverse, se3_exp, se3_log


class EmptyMetric(ValueError):
    """Not enough overlapping data to evaluate a metric."""


@dataclass
class TrajectoryRecord:
    """Timestamped poses (world-from-body) and world-frame velocities."""

    timestamps: np.ndarray
    rotations: np.ndarray  # (n, 3, 3)
    positions: np.ndarray  # (n, 3)
    velocities: np.ndarray  # (n, 3)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        n = self.timestamps.size
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(n, 3, 3)
        self.positions = np.asarray(self.positions, dtype=float).reshape(n, 3)
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(n, 3)
        if n > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return self.timestamps.size

    @classmethod
    def from_states(cls, states) -> TrajectoryRecord:
        """Build from objects exposing ``rotation``, ``position``, ``velocity``, ``timestamp``.

        Input order does not matter; states are sorted by time.
        """
        states = sorted(states, key=lambda s: s.timestamp)
        return cls(
            np.array([s.timestamp for s in states]),
            np.array([s.rotation for s in states]).reshape(-1, 3, 3),
            np.array([s.position for s in states]).reshape(-1, 3),
            np.array([s.velocity for s in states]).reshape(-1, 3),
        )

    def sorted(self) -> TrajectoryRecord:
        order = np.argsort(self.timestamps, kind="stable")
        return TrajectoryRecord(
            self.timestamps[order], self.rotations[order], self.positions[order], self.velocities[order]
        )

    def pose(self, i: int) -> Pose:
        return Pose(self.rotations[i], self.positions[i])

    def body_velocities(self) -> np.ndarray:
        return np.einsum("nji,nj->ni", self.rotations, self.velocities)

    def forward_velocity(self) -> np.ndarray:
        return self.body_velocities()[:, 0]

    def path_length(self) -> np.ndarray:
        steps = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def slice_time(self, t0: float, t1: float) -> TrajectoryRecord:
        sel = (self.timestamps >= t0 - 1e-9) & (self.timestamps <= t1 + 1e-9)
        return TrajectoryRecord(
            self.timestamps[sel], self.rotations[sel], self.positions[sel], self.velocities[sel]
        )

    def interpolate(self, times) -> TrajectoryRecord:
        """Resample at ``times`` (inside the span): geodesic on SE(3), linear velocity."""
        times = np.asarray(times, dtype=float)
        ts = self.timestamps
        if times.size and (times[0] < ts[0] - 1e-9 or times[-1] > ts[-1] + 1e-9):
            raise ValueError("interpolation times outside trajectory span")
        idx = np.clip(np.searchsorted(ts, times, side="right") - 1, 0, len(ts) - 1)
        rots = np.empty((times.size, 3, 3))
        pos = np.empty((times.size, 3))
        vel = np.empty((times.size, 3))
        for n, (t, i) in enumerate(zip(times, idx)):
            if i == len(ts) - 1 or abs(t - ts[i]) < 1e-12:
                rots[n], pos[n], vel[n] = self.rotations[i], self.positions[i], self.velocities[i]
                continue
            a = (t - ts[i]) / (ts[i + 1] - ts[i])
            Ta, Tb = self.pose(i), self.pose(i + 1)
            T = compose(Ta, se3_exp(a * se3_log(compose(inverse(Ta), Tb))))
            rots[n], pos[n] = T.rotation, T.translation
            vel[n] = (1 - a) * self.velocities[i] + a * self.velocities[i + 1]
        return TrajectoryRecord(times, rots, pos, vel)


def _overlap(est: TrajectoryRecord, gt: TrajectoryRecord) -> tuple[TrajectoryRecord, TrajectoryRecord]:
    est, gt = est.sorted(), gt.sorted()
    if len(est) == 0 or len(gt) == 0:
        raise EmptyMetric("empty trajectory")
    t0 = max(est.timestamps[0], gt.timestamps[0])
    t1 = min(est.timestamps[-1], gt.timestamps[-1])
    gt_o = gt.slice_time(t0, t1)
    if len(gt_o) == 0:
        raise EmptyMetric("trajectories do not overlap in time")
    return est.interpolate(np.clip(gt_o.timestamps, est.timestamps[0], est.timestamps[-1])), gt_o


@dataclass(frozen=True)
class ErrorStats:
    rmse: float
    std: float
    times: np.ndarray = field(repr=False)
    errors: np.ndarray = field(repr=False)

    def __iter__(self):
        return iter((self.rmse, self.std))


def _stats(times, errors) -> ErrorStats:
    errors = np.asarray(errors, dtype=float)
    return ErrorStats(float(np.sqrt(np.mean(errors**2))), float(np.std(errors)), np.asarray(times), errors)


def rpe(est: TrajectoryRecord, gt: TrajectoryRecord, delta: float = 10.0) -> ErrorStats:
    """Relative pose error over pairs ``delta`` metres of ground-truth path apart.

    The per-pair error is the norm of the full SE(3) log (rotation in rad and
    translation in m mixed), so the result is reported without units.
    """
    est_o, gt_o = _overlap(est, gt)
    path = gt_o.path_length()
    js = np.searchsorted(path, path + delta - 1e-12, side="left")
    times, errors = [], []
    for i, j in enumerate(js):
        if j >= len(gt_o):
            break
        gt_ij = compose(inverse(gt_o.pose(i)), gt_o.pose(j))
        est_ij = compose(inverse(est_o.pose(i)), est_o.pose(j))
        errors.append(np.linalg.norm(se3_log(compose(inverse(gt_ij), est_ij))))
        times.append(gt_o.timestamps[i])
    if not errors:
        raise EmptyMetric(f"trajectory path shorter than {delta} m")
    return _stats(times, errors)


def velocity_error(est: TrajectoryRecord, gt: TrajectoryRecord, axis: int = 0) -> ErrorStats:
    """Body-frame velocity error along ``axis`` (0 forward, 1 lateral, 2 vertical)."""
    est_o, gt_o = _overlap(est, gt)
    err = est_o.body_velocities()[:, axis] - gt_o.body_velocities()[:, axis]
    return _stats(gt_o.timestamps, err)


@dataclass
class MetricReport:
    """Serializable metric summary; ``to_dict`` gives the documented JSON keys."""

    rpe_rmse: float
    rpe_std: float
    vel_rmse: float
    vel_std: float
    rpe_series: ErrorStats | None = field(default=None, repr=False)
    vel_series: ErrorStats | None = field(default=None, repr=False)
    label: str = ""
    metadata: dict = field(default_factory=dict)

    KEYS = ("rpe_rmse", "rpe_std", "vel_rmse", "vel_std")

    def to_dict(self) -> dict:
        out = {"label": self.label}
        out.update({k: float(getattr(self, k)) for k in self.KEYS})
        out["metadata"] = self.metadata
        return out

    @classmethod
    def from_dict(cls, d: dict) -> MetricReport:
        missing = [k for k in cls.KEYS if k not in d]
        if missing:
            raise KeyError(f"metric report missing keys {missing}")
        return cls(*(float(d[k]) for k in cls.KEYS), label=d.get("label", ""), metadata=d.get("metadata", {}))


def evaluate(est: TrajectoryRecord, gt: TrajectoryRecord, delta: float = 10.0, label: str = "") -> MetricReport:
    r = rpe(est, gt, delta)
    v = velocity_error(est, gt)
    return MetricReport(r.rmse, r.std, v.rmse, v.std, r, v, label)

