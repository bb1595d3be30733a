"""On-disk formats for sensor streams, trajectories, beams and reports.

Delimited text
--------------
All CSV files are comma separated with one header line; floats are written
with ``repr`` precision (17 significant digits) so a read gives back the
exact values. Units are SI (s, m, m/s, rad, rad/s, m/s^2); angles in the
radar file are degrees. Quaternions are scalar-first (w, x, y, z), unit norm,
world-from-body.

``trajectory``  t, px, py, pz, qw, qx, qy, qz, vx, vy, vz   (world frame velocity)
``imu``         t, wx, wy, wz, fx, fy, fz                   (body rate, specific force)
``lidar``       t_prev, t_cur, px, py, pz, qw, qx, qy, qz, s_rx, s_ry, s_rz, s_px, s_py, s_pz
                (relative pose prev-from-cur and the standard deviations of a
                diagonal tangent covariance, rotation block first)
``doppler``     t, radial_speed, azimuth_deg, elevation_deg, n_votes, column
``errors``      t, error, squared_error

Beam container (``.npz``)
-------------------------
A numpy zip archive with these members:

``header``            0-d unicode array holding JSON: ``{"format": "rvlio-beams",
                      "version": 1, "waveform": {...WaveformConfig fields...},
                      "n_beams": n, "layout": "beam, pixel (3 elevation rows x 4
                      azimuth columns, row-major), range bin, doppler bin"}``
``pixels``            (n, 12, n_range_bins, n_doppler_bins) linear power, float32 or float64
``timestamps``        (n,) float64 seconds
``center_azimuth``    (n,) float64 degrees
``center_elevation``  (n,) float64 degrees
``pixel_azimuths``    (n, 4) float64 degrees
``pixel_elevations``  (n, 3) float64 degrees

Reports
-------
Metric reports are JSON objects with keys ``label``, ``rpe_rmse``,
``rpe_std``, ``vel_rmse``, ``vel_std`` and ``metadata``, written with sorted
keys and two-space indent.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from rvlio.estimator.types import ImuMeasurement, LidarRelativePose
from rvlio.evaluation import MetricReport, TrajectoryRecord
from rvlio.geometry import Pose
from rvlio.radar_dsp import BeamMeasurement, DopplerMeasurement, WaveformConfig

BEAM_FORMAT = "rvlio-beams"
BEAM_FORMAT_VERSION = 1

TRAJECTORY_COLUMNS = ("t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz")
IMU_COLUMNS = ("t", "wx", "wy", "wz", "fx", "fy", "fz")
LIDAR_COLUMNS = (
    "t_prev", "t_cur", "px", "py", "pz", "qw", "qx", "qy", "qz",
    "s_rx", "s_ry", "s_rz", "s_px", "s_py", "s_pz",
)  # fmt: skip
DOPPLER_COLUMNS = ("t", "radial_speed", "azimuth_deg", "elevation_deg", "n_votes", "column")
ERROR_COLUMNS = ("t", "error", "squared_error")


class FormatError(ValueError):
    """File content does not match the documented layout."""


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_rows(path, columns, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _read_rows(path, columns) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != tuple(columns):
            raise FormatError(f"{path}: expected header {','.join(columns)}, got {header}")
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        return np.zeros((0, len(columns)))
    data = np.array(rows)
    if data.shape[1] != len(columns):
        raise FormatError(f"{path}: rows must have {len(columns)} fields")
    return data


def _quat(rotations: np.ndarray) -> np.ndarray:
    """Scalar-first quaternions with non-negative w (a unique representative)."""
    q = Rotation.from_matrix(rotations).as_quat()  # x, y, z, w
    q = np.column_stack([q[:, 3], q[:, :3]])
    q[q[:, 0] < 0] *= -1.0
    return q


def _rot(q: np.ndarray) -> np.ndarray:
    return Rotation.from_quat(np.column_stack([q[:, 1:], q[:, 0]])).as_matrix()


# -- trajectories -------------------------------------------------------------


def write_trajectory(path, rec: TrajectoryRecord) -> None:
    q = _quat(rec.rotations) if len(rec) else np.zeros((0, 4))
    rows = np.column_stack([rec.timestamps, rec.positions, q, rec.velocities])
    _write_rows(path, TRAJECTORY_COLUMNS, rows)


def read_trajectory(path) -> TrajectoryRecord:
    d = _read_rows(path, TRAJECTORY_COLUMNS)
    rots = _rot(d[:, 4:8]) if len(d) else np.zeros((0, 3, 3))
    return TrajectoryRecord(d[:, 0], rots, d[:, 1:4], d[:, 8:11])


# -- sensor streams -------------------------------------------------------------


def write_imu(path, stream: list[ImuMeasurement]) -> None:
    rows = ([m.timestamp, *m.angular_velocity, *m.specific_force] for m in stream)
    _write_rows(path, IMU_COLUMNS, rows)


def read_imu(path) -> list[ImuMeasurement]:
    d = _read_rows(path, IMU_COLUMNS)
    return [ImuMeasurement(r[1:4].copy(), r[4:7].copy(), float(r[0])) for r in d]


def write_lidar(path, stream: list[LidarRelativePose]) -> None:
    rows = []
    for m in stream:
        cov = np.asarray(m.covariance, dtype=float)
        if np.any(np.abs(cov - np.diag(np.diag(cov))) > 0):
            raise FormatError("LiDAR file stores diagonal covariances only")
        q = _quat(m.relative_transform.rotation[None])[0]
        rows.append([m.t_prev, m.t_cur, *m.relative_transform.translation, *q, *np.sqrt(np.diag(cov))])
    _write_rows(path, LIDAR_COLUMNS, rows)


def read_lidar(path) -> list[LidarRelativePose]:
    d = _read_rows(path, LIDAR_COLUMNS)
    if not len(d):
        return []
    rots = _rot(d[:, 5:9])
    return [
        LidarRelativePose(Pose(R, r[2:5].copy()), np.diag(r[9:15] ** 2), float(r[0]), float(r[1]))
        for R, r in zip(rots, d)
    ]


def write_doppler(path, stream: list[DopplerMeasurement]) -> None:
    rows = ([m.timestamp, m.radial_speed, m.azimuth, m.elevation, int(m.n_votes), int(m.column)] for m in stream)
    _write_rows(path, DOPPLER_COLUMNS, rows)


def read_doppler(path) -> list[DopplerMeasurement]:
    d = _read_rows(path, DOPPLER_COLUMNS)
    return [
        DopplerMeasurement(float(r[1]), float(r[2]), float(r[3]), float(r[0]), int(r[4]), int(r[5])) for r in d
    ]


def write_errors(path, times, errors) -> None:
    e = np.asarray(errors, dtype=float)
    _write_rows(path, ERROR_COLUMNS, np.column_stack([np.asarray(times, dtype=float), e, e * e]))


def read_errors(path) -> tuple[np.ndarray, np.ndarray]:
    d = _read_rows(path, ERROR_COLUMNS)
    return d[:, 0], d[:, 1]


# -- beams --------------------------------------------------------------------------


def write_beams(path, beams: list[BeamMeasurement], dtype=np.float32) -> None:
    """Write beams sharing one waveform; intensities are stored as ``dtype``."""
    beams = list(beams)
    if not beams:
        raise FormatError("no beams to write")
    wf = beams[0].waveform
    if any(b.waveform != wf for b in beams):
        raise FormatError("all beams in a file must share one waveform")
    header = {
        "format": BEAM_FORMAT,
        "version": BEAM_FORMAT_VERSION,
        "waveform": asdict(wf),
        "n_beams": len(beams),
        "layout": "beam, pixel (3 elevation rows x 4 azimuth columns, row-major), range bin, doppler bin",
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez_compressed(
            fh,
            header=np.array(json.dumps(header, sort_keys=True)),
            pixels=np.stack([b.pixels for b in beams]).astype(dtype),
            timestamps=np.array([b.timestamp for b in beams], dtype=float),
            center_azimuth=np.array([b.beam_center_azimuth for b in beams], dtype=float),
            center_elevation=np.array([b.beam_center_elevation for b in beams], dtype=float),
            pixel_azimuths=np.stack([b.pixel_azimuths for b in beams]),
            pixel_elevations=np.stack([b.pixel_elevations for b in beams]),
        )


def read_beams(path) -> list[BeamMeasurement]:
    with np.load(path, allow_pickle=False) as z:
        try:
            header = json.loads(str(z["header"]))
        except KeyError as exc:
            raise FormatError(f"{path}: missing header") from exc
        if header.get("format") != BEAM_FORMAT or header.get("version") != BEAM_FORMAT_VERSION:
            raise FormatError(f"{path}: not an {BEAM_FORMAT} v{BEAM_FORMAT_VERSION} file")
        wf = WaveformConfig(**header["waveform"])
        pixels = z["pixels"]
        n = int(header["n_beams"])
        if pixels.shape != (n, 12, *wf.shape):
            raise FormatError(f"{path}: pixel array shape {pixels.shape} disagrees with header")
        return [
            BeamMeasurement(
                pixels[i],
                wf,
                float(z["center_azimuth"][i]),
                float(z["center_elevation"][i]),
                float(z["timestamps"][i]),
                z["pixel_azimuths"][i],
                z["pixel_elevations"][i],
            )
            for i in range(n)
        ]


# -- reports ------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_json(path, data: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(data), sort_keys=True, indent=2) + "\n")


def write_report(path, report: MetricReport) -> None:
    write_json(path, report.to_dict())


def read_report(path) -> MetricReport:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise FormatError(f"{path}: report must be a JSON object")
    return MetricReport.from_dict(data)
