"""Configuration and end-to-end runner: simulate, process radar, estimate, evaluate, write.

A config is a YAML (or JSON) mapping whose sections mirror the dataclasses
below; every key is optional and unknown keys are rejected by name.
"""
from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import yaml

import rvlio
from rvlio import formats
from rvlio.estimator import EstimatorConfig, Extrinsics, FixedLagSmoother, ImuNoise, IngestStats
from rvlio.estimator.smoother import MODALITIES
from rvlio.evaluation import EmptyMetric, MetricReport, TrajectoryRecord, evaluate, velocity_error
from rvlio.geometry import rot_y
from rvlio.radar_dsp import CfarConfig, DopplerMeasurement, WaveformConfig, process_beam
from rvlio.sensor_sim import (
    DropoutSchedule,
    ImuErrorModel,
    NoiseBank,
    SceneModel,
    SweepPattern,
    desk_profile,
    generate_truth,
    random_scene,
    simulate_imu,
    simulate_lidar_odometry,
    sweep_beams,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


@dataclass(frozen=True)
class TrajectorySection:
    duration: float = 60.0
    static: float = 2.0
    top_speed: float = 12.0


@dataclass(frozen=True)
class ImuSection:
    rate: float = 200.0
    gyro_noise: float = 1e-3
    accel_noise: float = 1e-2
    gyro_bias: tuple = (1e-3, -2e-3, 1.5e-3)
    accel_bias: tuple = (0.05, -0.08, 0.03)
    gyro_bias_walk: float = 1e-5
    accel_bias_walk: float = 1e-4


@dataclass(frozen=True)
class LidarSection:
    rate: float = 10.0
    sigma_position: float = 0.02
    sigma_rotation: float = 0.005


@dataclass(frozen=True)
class SceneSection:
    extent: float = 1000.0
    n_targets: int = 2000
    target_power: float = 2000.0
    ground_points_per_pixel: int = 24
    ground_power: float = 400.0
    noise_power: float = 1.0


@dataclass(frozen=True)
class RadarSection:
    n_range_bins: int = 64
    n_doppler_bins: int = 512
    guard_cells_range: int = 2
    guard_cells_doppler: int = 2
    reference_cells_range: int = 8
    reference_cells_doppler: int = 8
    p_fa: float = 1e-3
    range_bounds: tuple = (1.0, 30.0)
    doppler_bounds: tuple = (-15.0, 3.0)
    min_votes: int = 4
    azimuth_min: float = -38.0
    azimuth_max: float = 38.0
    azimuth_step: float = 4.0
    elevation: float = -2.5
    mount_pitch_deg: float = 2.5
    position: tuple = (0.4, 0.0, 0.3)
    noise_bank_maps: int = 48
    save_beams: int = 20

    def waveform(self) -> WaveformConfig:
        return WaveformConfig(n_range_bins=self.n_range_bins, n_doppler_bins=self.n_doppler_bins)

    def cfar(self) -> CfarConfig:
        return CfarConfig(
            self.guard_cells_range,
            self.guard_cells_doppler,
            self.reference_cells_range,
            self.reference_cells_doppler,
            self.p_fa,
        )

    def pattern(self) -> SweepPattern:
        az = np.arange(self.azimuth_min, self.azimuth_max + 1e-9, self.azimuth_step)
        return SweepPattern(tuple(float(a) for a in az), self.elevation)

    def extrinsics(self) -> Extrinsics:
        # pitched down by mount_pitch_deg: R_RI maps IMU vectors into the radar frame
        return Extrinsics(
            imu_to_radar_rotation=rot_y(np.deg2rad(self.mount_pitch_deg)).T,
            radar_position_in_imu=np.asarray(self.position, dtype=float),
        )


@dataclass(frozen=True)
class EstimatorSection:
    lag: float = 1.5
    node_rate: float = 10.0
    radar_sigma: float = 0.169
    huber_delta: float | None = 1.345
    init_duration: float = 1.0
    max_iterations: int = 50
    step_tolerance: float = 1e-8
    cost_tolerance: float = 1e-6


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output: str = "runs/experiment"
    modalities: tuple = ("LI", "LRI")
    dropout: tuple = ()
    rpe_delta: float = 10.0
    evaluation_rate: float = 50.0
    # "odometry": chained per-update relative motion; "latest": newest state after each update
    estimate_output: str = "odometry"
    trajectory: TrajectorySection = TrajectorySection()
    imu: ImuSection = ImuSection()
    lidar: LidarSection = LidarSection()
    scene: SceneSection = SceneSection()
    radar: RadarSection = RadarSection()
    estimator: EstimatorSection = EstimatorSection()

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def reproducible_dict(self) -> dict:
        """Everything that affects outputs (the output directory does not)."""
        d = self.to_dict()
        del d["output"]
        return d

    def sha256(self) -> str:
        return hashlib.sha256(json.dumps(self.reproducible_dict(), sort_keys=True).encode()).hexdigest()

    def schedule(self) -> DropoutSchedule:
        return DropoutSchedule(self.dropout)

    def estimator_config(self) -> EstimatorConfig:
        e, i, li = self.estimator, self.imu, self.lidar
        return EstimatorConfig(
            lag=e.lag,
            node_rate=e.node_rate,
            imu_noise=ImuNoise(i.gyro_noise, i.accel_noise, i.gyro_bias_walk, i.accel_bias_walk),
            lidar_sigma_position=li.sigma_position,
            lidar_sigma_rotation=li.sigma_rotation,
            radar_sigma=e.radar_sigma,
            huber_delta=e.huber_delta,
            init_duration=e.init_duration,
            max_iterations=e.max_iterations,
            step_tolerance=e.step_tolerance,
            cost_tolerance=e.cost_tolerance,
        )

    def with_overrides(self, **kw) -> ExperimentConfig:
        """Copy with top-level fields replaced; ``None`` values are ignored."""
        kw = {k: v for k, v in kw.items() if v is not None}
        data = self.to_dict()
        data.update(_plain(kw))
        return config_from_dict(data)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _coerce(value, default, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float) or default is None:
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _build(cls, data, prefix: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
        default = fields[key].default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{prefix}{key}.")
        elif value is None and "None" in str(fields[key].type):
            kwargs[key] = None
        else:
            kwargs[key] = _coerce(value, default, f"{prefix}{key}")
    return cls(**kwargs)


def _check(cond: bool, key: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check cross-field constraints; raises :class:`ConfigError` naming the key."""
    t = cfg.trajectory
    _check(t.duration > 0, "trajectory.duration", "must be positive")
    _check(t.static >= cfg.estimator.init_duration, "trajectory.static", "must cover estimator.init_duration")
    _check(t.top_speed > 0, "trajectory.top_speed", "must be positive")
    for name in ("rate", "gyro_noise", "accel_noise"):
        _check(getattr(cfg.imu, name) > 0, f"imu.{name}", "must be positive")
    for name in ("gyro_bias", "accel_bias"):
        _check(len(getattr(cfg.imu, name)) == 3, f"imu.{name}", "needs 3 components")
    _check(cfg.lidar.rate > 0, "lidar.rate", "must be positive")
    _check(cfg.lidar.sigma_position > 0 and cfg.lidar.sigma_rotation > 0, "lidar", "sigmas must be positive")
    _check(len(cfg.modalities) > 0, "modalities", "at least one of LI, RI, LRI required")
    for m in cfg.modalities:
        _check(m in MODALITIES, "modalities", f"unknown modality {m!r} (use LI, RI or LRI)")
    _check(len(set(cfg.modalities)) == len(cfg.modalities), "modalities", "duplicates")
    try:
        windows = tuple(tuple(float(x) for x in w) for w in cfg.dropout)
        if any(len(w) != 2 for w in windows):
            raise ValueError("each window is [start, end]")
        DropoutSchedule(windows).validate_for(t.duration)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dropout: {exc}") from exc
    r = cfg.radar
    try:
        r.waveform()
        r.cfar()
    except ValueError as exc:
        raise ConfigError(f"radar: {exc}") from exc
    _check(len(r.range_bounds) == 2 and r.range_bounds[0] < r.range_bounds[1], "radar.range_bounds", "need [min, max]")
    _check(
        len(r.doppler_bounds) == 2 and r.doppler_bounds[0] < r.doppler_bounds[1], "radar.doppler_bounds", "need [min, max]"
    )
    _check(r.azimuth_step > 0 and r.azimuth_min <= r.azimuth_max, "radar.azimuth_step", "empty sweep")
    _check(max(abs(r.azimuth_min), abs(r.azimuth_max)) < 90, "radar.azimuth_max", "must stay inside +-90 deg")
    _check(len(r.position) == 3, "radar.position", "needs 3 components")
    _check(r.noise_bank_maps == 0 or r.noise_bank_maps >= 12, "radar.noise_bank_maps", "0 (fresh noise) or >= 12")
    _check(r.save_beams >= 0, "radar.save_beams", "must be >= 0")
    s = cfg.scene
    _check(s.noise_power > 0 and s.target_power > 0 and s.ground_power >= 0, "scene", "powers must be positive")
    e = cfg.estimator
    _check(e.lag > 0 and e.node_rate > 0, "estimator", "lag and node_rate must be positive")
    _check(e.radar_sigma > 0, "estimator.radar_sigma", "must be positive")
    _check(e.huber_delta is None or e.huber_delta > 0, "estimator.huber_delta", "must be positive or null")
    _check(cfg.rpe_delta > 0, "rpe_delta", "must be positive")
    _check(cfg.evaluation_rate > 0, "evaluation_rate", "must be positive")
    _check(cfg.estimate_output in ("odometry", "latest"), "estimate_output", "use odometry or latest")
    return dataclasses.replace(cfg, dropout=windows)


def config_from_dict(data: dict) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, data))


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return config_from_dict(data or {})


# -- pipeline -------------------------------------------------------------------


def child_seeds(seed: int) -> dict[str, int]:
    names = ("imu", "lidar", "scene", "noise_bank", "radar")
    states = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(s.generate_state(1)[0]) for n, s in zip(names, states)}


def trajectory_profile(cfg: ExperimentConfig):
    t = cfg.trajectory
    return desk_profile(t.duration, t.static, t.top_speed)


@dataclass
class SimulatedStreams:
    imu: list
    lidar: list
    truth: TrajectoryRecord


def simulate_streams(cfg: ExperimentConfig) -> SimulatedStreams:
    """IMU, LiDAR (dropout applied) and truth sampled at the evaluation rate."""
    seeds = child_seeds(cfg.seed)
    profile = trajectory_profile(cfg)
    i = cfg.imu
    errors = ImuErrorModel(i.gyro_noise, i.accel_noise, i.gyro_bias, i.accel_bias, i.gyro_bias_walk, i.accel_bias_walk)
    imu = simulate_imu(profile, i.rate, errors, seed=seeds["imu"])
    lidar = simulate_lidar_odometry(
        profile, cfg.lidar.rate, cfg.lidar.sigma_position, cfg.lidar.sigma_rotation, cfg.schedule(), seeds["lidar"]
    )
    truth = generate_truth(profile, cfg.evaluation_rate).record()
    return SimulatedStreams(imu, lidar, truth)


def _scene(cfg: ExperimentConfig, seed: int) -> SceneModel:
    s = cfg.scene
    base = random_scene(seed, s.extent, s.n_targets, s.target_power)
    return SceneModel(base.targets, base.reflectivity, s.ground_points_per_pixel, s.ground_power, s.noise_power)


def simulate_beams(cfg: ExperimentConfig):
    """Generator of simulated radar beams for the whole run."""
    seeds = child_seeds(cfg.seed)
    r = cfg.radar
    wf = r.waveform()
    bank = NoiseBank(wf, cfg.scene.noise_power, r.noise_bank_maps, seeds["noise_bank"]) if r.noise_bank_maps else None
    profile = trajectory_profile(cfg)
    return sweep_beams(profile, _scene(cfg, seeds["scene"]), r.pattern(), wf, seeds["radar"], r.extrinsics(), bank)


@dataclass(frozen=True)
class RadarResult:
    measurements: tuple
    n_beams: int
    saved_beams: tuple = field(default=(), repr=False)

    @property
    def valid_fraction(self) -> float:
        return len(self.measurements) / self.n_beams if self.n_beams else 0.0


def process_radar(cfg: ExperimentConfig) -> RadarResult:
    """Simulate and condense every beam; cached per (seed, trajectory, scene, radar)."""
    return _process_radar_cached(cfg.seed, cfg.trajectory, cfg.scene, cfg.radar)


@functools.lru_cache(maxsize=4)
def _process_radar_cached(seed, trajectory, scene, radar) -> RadarResult:
    cfg = ExperimentConfig(seed=seed, trajectory=trajectory, scene=scene, radar=radar)
    cfar = radar.cfar()
    out: list[DopplerMeasurement] = []
    saved = []
    n = 0
    for beam in simulate_beams(cfg):
        if n < radar.save_beams:
            saved.append(beam)
        n += 1
        m = process_beam(beam, cfar, radar.range_bounds, radar.doppler_bounds, radar.min_votes)
        if m is not None:
            out.append(m)
    return RadarResult(tuple(out), n, tuple(saved))


@dataclass
class ModalityRun:
    modality: str
    estimate: TrajectoryRecord
    stats: IngestStats
    report: MetricReport

    @property
    def converged(self) -> bool:
        return self.stats.not_converged == 0


def estimate(cfg: ExperimentConfig, modality: str, streams: SimulatedStreams, radar: RadarResult | None):
    smoother = FixedLagSmoother(cfg.estimator_config(), cfg.radar.extrinsics(), modality)
    states = smoother.ingest(streams.imu, streams.lidar, list(radar.measurements) if radar else [])
    if cfg.estimate_output == "odometry":
        states = smoother.odometry
    return TrajectoryRecord.from_states(states), smoother.stats


def run_modality(cfg: ExperimentConfig, modality: str, streams: SimulatedStreams, radar) -> ModalityRun:
    est, stats = estimate(cfg, modality, streams, radar)
    meta = {
        "modality": modality,
        "seed": cfg.seed,
        "dropout": [list(w) for w in cfg.dropout],
        "rpe_delta": cfg.rpe_delta,
        "nodes": stats.nodes,
        "not_converged": stats.not_converged,
    }
    try:
        report = evaluate(est, streams.truth, cfg.rpe_delta, label=modality)
    except EmptyMetric as exc:
        log.warning("%s: %s", modality, exc)
        report = MetricReport(float("nan"), float("nan"), float("nan"), float("nan"), label=modality)
    report.metadata = meta
    return ModalityRun(modality, est, stats, report)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    streams: SimulatedStreams
    radar: RadarResult | None
    runs: dict[str, ModalityRun]

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.runs.values())


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None) -> ExperimentResult:
    """Run every configured modality on one shared simulation; write artifacts if ``out``."""
    streams = simulate_streams(cfg)
    needs_radar = any("radar" in MODALITIES[m] for m in cfg.modalities)
    radar = process_radar(cfg) if needs_radar else None
    runs = {}
    for m in cfg.modalities:
        runs[m] = run_modality(cfg, m, streams, radar)
        log.info("%s: rpe %.4f vel %.4f", m, runs[m].report.rpe_rmse, runs[m].report.vel_rmse)
    result = ExperimentResult(cfg, streams, radar, runs)
    if out is not None:
        write_artifacts(result, Path(out))
    return result


# -- artifacts ------------------------------------------------------------------


def versions() -> dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "rvlio": rvlio.__version__,
    }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_artifacts(result: ExperimentResult, out: Path) -> dict:
    from rvlio import plots

    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    formats.write_json(out / "config.json", cfg.reproducible_dict())
    formats.write_trajectory(out / "truth.csv", result.streams.truth)
    if result.radar is not None:
        formats.write_doppler(out / "radar_doppler.csv", result.radar.measurements)
    for m, run in result.runs.items():
        formats.write_trajectory(out / f"estimate_{m}.csv", run.estimate)
        formats.write_report(out / f"metrics_{m}.json", run.report)
        if run.report.vel_series is not None:
            s = run.report.vel_series
            formats.write_errors(out / f"vel_errors_{m}.csv", s.times, s.errors)
        if run.report.rpe_series is not None:
            s = run.report.rpe_series
            formats.write_errors(out / f"rpe_errors_{m}.csv", s.times, s.errors)
    plots.write_plots(result, out)
    files = sorted(p for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "config_sha256": cfg.sha256(),
        "seed": cfg.seed,
        "versions": versions(),
        "modalities": list(result.runs),
        "dropout": [list(w) for w in cfg.dropout],
        "status": "ok" if result.converged else "non-converged",
        "not_converged": {m: r.stats.not_converged for m, r in result.runs.items()},
        "radar": None
        if result.radar is None
        else {"beams": result.radar.n_beams, "valid": len(result.radar.measurements)},
        "files": {p.name: _sha256(p) for p in files},
    }
    formats.write_json(out / "manifest.json", manifest)
    return manifest


def forward_velocity_series(run: ModalityRun, truth: TrajectoryRecord):
    return velocity_error(run.estimate, truth, axis=0)
