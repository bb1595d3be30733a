import json

import numpy as np
import pytest

from rvlio import formats
from rvlio.estimator import ImuMeasurement, LidarRelativePose
from rvlio.evaluation import MetricReport, TrajectoryRecord
from rvlio.formats import FormatError
from rvlio.geometry import Pose, so3_exp
from rvlio.radar_dsp import BeamMeasurement, DopplerMeasurement, WaveformConfig


def random_record(rng, n=20):
    R = np.array([so3_exp(w) for w in rng.normal(size=(n, 3)) * 2])
    return TrajectoryRecord(np.cumsum(rng.uniform(0.01, 0.1, n)), R, rng.normal(size=(n, 3)), rng.normal(size=(n, 3)))


def test_trajectory_round_trip(tmp_path):
    rec = random_record(np.random.default_rng(0))
    formats.write_trajectory(tmp_path / "t.csv", rec)
    back = formats.read_trajectory(tmp_path / "t.csv")
    assert np.array_equal(back.timestamps, rec.timestamps)
    assert np.array_equal(back.positions, rec.positions) and np.array_equal(back.velocities, rec.velocities)
    assert np.abs(back.rotations - rec.rotations).max() < 1e-15 * 10
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "t,px,py,pz,qw,qx,qy,qz,vx,vy,vz"


def test_quaternions_are_scalar_first_with_positive_w(tmp_path):
    R = np.array([so3_exp([0, 0, np.pi / 2]), so3_exp([0, 0, 3.0])])
    formats.write_trajectory(tmp_path / "t.csv", TrajectoryRecord([0, 1], R, np.zeros((2, 3)), np.zeros((2, 3))))
    rows = np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1)
    assert np.allclose(rows[0, 4:8], [np.sqrt(0.5), 0, 0, np.sqrt(0.5)])
    assert np.all(rows[:, 4] >= 0)


def test_empty_trajectory(tmp_path):
    empty = TrajectoryRecord(np.zeros(0), np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros((0, 3)))
    formats.write_trajectory(tmp_path / "e.csv", empty)
    assert len(formats.read_trajectory(tmp_path / "e.csv")) == 0


def test_imu_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    imu = [ImuMeasurement(rng.normal(size=3), rng.normal(size=3), i * 0.005) for i in range(50)]
    formats.write_imu(tmp_path / "imu.csv", imu)
    back = formats.read_imu(tmp_path / "imu.csv")
    assert len(back) == 50
    for a, b in zip(imu, back):
        assert a.timestamp == b.timestamp
        assert np.array_equal(a.angular_velocity, b.angular_velocity)
        assert np.array_equal(a.specific_force, b.specific_force)


def test_lidar_round_trip_and_diagonal_only(tmp_path):
    rng = np.random.default_rng(2)
    sig = np.array([0.005] * 3 + [0.02] * 3)
    meas = [
        LidarRelativePose(Pose(so3_exp(rng.normal(size=3) * 0.1), rng.normal(size=3)), np.diag(sig**2), 0.1 * k, 0.1 * (k + 1))
        for k in range(10)
    ]
    formats.write_lidar(tmp_path / "l.csv", meas)
    back = formats.read_lidar(tmp_path / "l.csv")
    for a, b in zip(meas, back):
        assert (a.t_prev, a.t_cur) == (b.t_prev, b.t_cur)
        assert np.abs(a.relative_transform.matrix() - b.relative_transform.matrix()).max() < 1e-15 * 10
        assert np.allclose(a.covariance, b.covariance, rtol=1e-15)
    full = np.eye(6)
    full[0, 1] = full[1, 0] = 0.1
    with pytest.raises(FormatError):
        formats.write_lidar(tmp_path / "bad.csv", [LidarRelativePose(Pose.identity(), full, 0, 1)])


def test_doppler_and_errors_round_trip(tmp_path):
    dop = [DopplerMeasurement(-3.5, 12.0, -2.5, 0.25, 7, 300), DopplerMeasurement(0.1, -38.0, -2.5, 0.3, 4, 257)]
    formats.write_doppler(tmp_path / "d.csv", dop)
    assert formats.read_doppler(tmp_path / "d.csv") == dop
    t, e = np.arange(5.0), np.array([0.1, -0.2, 0.3, 0.0, 1e-17])
    formats.write_errors(tmp_path / "e.csv", t, e)
    t2, e2 = formats.read_errors(tmp_path / "e.csv")
    assert np.array_equal(t, t2) and np.array_equal(e, e2)
    sq = np.loadtxt(tmp_path / "e.csv", delimiter=",", skiprows=1)[:, 2]
    assert np.array_equal(sq, e * e)


def small_beams(rng, n=3):
    wf = WaveformConfig(n_range_bins=8, n_doppler_bins=16)
    return [
        BeamMeasurement(
            rng.exponential(size=(12, 8, 16)), wf, 4.0 * k, -2.5, 0.0158 * k,
            np.array([-1.5, -0.5, 0.5, 1.5]) + 4.0 * k, np.array([-3.5, -2.5, -1.5]),
        )
        for k in range(n)
    ]  # fmt: skip


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_beams_round_trip(tmp_path, dtype):
    beams = small_beams(np.random.default_rng(3))
    formats.write_beams(tmp_path / "b.npz", beams, dtype=dtype)
    back = formats.read_beams(tmp_path / "b.npz")
    assert len(back) == 3
    for a, b in zip(beams, back):
        assert b.waveform == a.waveform and b.timestamp == a.timestamp
        assert b.beam_center_azimuth == a.beam_center_azimuth
        assert np.array_equal(b.pixels, a.pixels.astype(dtype))
        assert np.array_equal(b.pixel_azimuths, a.pixel_azimuths)
    with np.load(tmp_path / "b.npz") as z:
        header = json.loads(str(z["header"]))
    assert header["format"] == "rvlio-beams" and header["version"] == 1 and header["n_beams"] == 3


def test_beam_file_errors(tmp_path):
    rng = np.random.default_rng(4)
    with pytest.raises(FormatError):
        formats.write_beams(tmp_path / "x.npz", [])
    beams = small_beams(rng, 2)
    other = BeamMeasurement(beams[1].pixels, WaveformConfig(n_range_bins=8, n_doppler_bins=16, max_range=50.0), 0, 0, 0)
    with pytest.raises(FormatError):
        formats.write_beams(tmp_path / "x.npz", [beams[0], other])
    np.savez(tmp_path / "nohdr.npz", pixels=np.zeros(3))
    with pytest.raises(FormatError):
        formats.read_beams(tmp_path / "nohdr.npz")
    np.savez(tmp_path / "wrong.npz", header=np.array(json.dumps({"format": "other", "version": 1})))
    with pytest.raises(FormatError):
        formats.read_beams(tmp_path / "wrong.npz")


def test_csv_header_and_width_checked(tmp_path):
    p = tmp_path / "imu.csv"
    p.write_text("t,a,b\n0,1,2\n")
    with pytest.raises(FormatError):
        formats.read_imu(p)
    p.write_text("t,wx,wy,wz,fx,fy,fz\n0,1,2,3\n")
    with pytest.raises(FormatError):
        formats.read_imu(p)


def test_report_round_trip(tmp_path):
    rep = MetricReport(0.1, 0.02, 0.05, 0.01, label="LRI", metadata={"seed": np.int64(3), "x": np.arange(2)})
    formats.write_report(tmp_path / "m.json", rep)
    text = (tmp_path / "m.json").read_text()
    data = json.loads(text)
    assert list(data) == sorted(data) and data["metadata"] == {"seed": 3, "x": [0, 1]}
    back = formats.read_report(tmp_path / "m.json")
    assert (back.rpe_rmse, back.rpe_std, back.vel_rmse, back.vel_std, back.label) == (0.1, 0.02, 0.05, 0.01, "LRI")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(FormatError):
        formats.read_report(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(FormatError):
        formats.read_report(tmp_path / "list.json")
