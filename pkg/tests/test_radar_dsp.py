import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rvlio.estimator import Extrinsics
from rvlio.radar_dsp import (
    TABLE1_WAVEFORM,
    BeamMeasurement,
    CfarConfig,
    DopplerMeasurement,
    RangeDopplerMap,
    WaveformConfig,
    beam_consensus,
    bin_to_doppler,
    bin_to_range,
    ca_cfar_2d,
    cfar_threshold_scale,
    doppler_to_bin,
    doppler_to_forward_velocity,
    pixel_doppler_vote,
    process_beam,
    trim_mask,
)
from rvlio.sensor_sim import SceneModel, Segment, TrajectoryProfile, simulate_radar_beam

WF64 = WaveformConfig(n_range_bins=64)
CFAR = CfarConfig()
RANGE_BOUNDS, DOPPLER_BOUNDS = (1.0, 30.0), (-15.0, 3.0)


def brute_force_cfar(a, cfg):
    """Cell-by-cell CA-CFAR with border windows clipped to the map."""
    nr, nc = a.shape
    gr, gd = cfg.guard_cells_range, cfg.guard_cells_doppler
    mr, md = gr + cfg.reference_cells_range, gd + cfg.reference_cells_doppler
    out = np.zeros_like(a, dtype=bool)
    for i in range(nr):
        for j in range(nc):
            ref = []
            for r in range(max(0, i - mr), min(nr, i + mr + 1)):
                for c in range(max(0, j - md), min(nc, j + md + 1)):
                    if abs(r - i) > gr or abs(c - j) > gd:
                        ref.append(a[r, c])
            n = len(ref)
            p = mpmath.mpf(cfg.p_fa)
            alpha = float(n * (p ** (-mpmath.mpf(1) / n) - 1))
            out[i, j] = a[i, j] > alpha * (sum(ref) / n)
    return out


# -- threshold scale ------------------------------------------------------------


def test_threshold_scale_examples():
    assert cfar_threshold_scale(1, 0.1) == pytest.approx(9.0, abs=1e-12)
    mpmath.mp.dps = 40
    exact = 16 * (mpmath.mpf("0.01") ** (-mpmath.mpf(1) / 16) - 1)
    assert abs(cfar_threshold_scale(16, 0.01) - float(exact)) < 1e-12
    assert cfar_threshold_scale(16, 0.01) == pytest.approx(5.33634291, abs=1e-8)
    assert cfar_threshold_scale(16, 1 - 1e-12) < 1e-10


def test_threshold_scale_vectorized_and_rejects_bad_input():
    n = np.array([1, 16, 288])
    assert np.allclose(cfar_threshold_scale(n, 1e-3), [cfar_threshold_scale(int(k), 1e-3) for k in n])
    with pytest.raises(ValueError):
        cfar_threshold_scale(16, 0.0)
    with pytest.raises(ValueError):
        cfar_threshold_scale(0, 0.1)


def test_default_window_reference_count():
    # 2 guard + 8 reference per side: 21x21 outer square minus 5x5 guard block
    assert CFAR.n_reference == 21 * 21 - 5 * 5 == 416


# -- CA-CFAR --------------------------------------------------------------------


def test_cfar_zero_map_has_no_detections():
    wf = WaveformConfig(n_range_bins=16, n_doppler_bins=16)
    assert not ca_cfar_2d(RangeDopplerMap(np.zeros(wf.shape), wf), CFAR).any()


def test_cfar_single_spike_on_flat_map():
    cfg = CfarConfig(1, 1, 1, 1, p_fa=0.01)
    assert cfg.n_reference == 16
    a = np.ones((20, 20))
    a[10, 10] = 1000.0
    mask = ca_cfar_2d(a, cfg)
    assert mask[10, 10]
    assert mask.sum() == 1


def test_cfar_matches_brute_force_including_borders():
    rng = np.random.default_rng(0)
    cfg = CfarConfig(1, 2, 3, 2, p_fa=0.05)
    for _ in range(3):
        a = rng.exponential(size=(14, 17))
        a[rng.integers(14), rng.integers(17)] += 40
        assert np.array_equal(ca_cfar_2d(a, cfg), brute_force_cfar(a, cfg))


def test_cfar_block_equals_crop_of_full_map():
    rng = np.random.default_rng(1)
    a = rng.exponential(size=(3, 40, 60))
    full = ca_cfar_2d(a, CFAR)
    part = ca_cfar_2d(a, CFAR, rows=(5, 33), cols=(7, 41))
    assert np.array_equal(part[..., 5:33, 7:41], full[..., 5:33, 7:41])
    assert not part[..., :5, :].any() and not part[..., :, 41:].any()


@pytest.mark.parametrize("p_fa", [1e-2, 1e-3])
def test_cfar_false_alarm_rate(p_fa):
    rng = np.random.default_rng(7)
    cells = rng.exponential(size=(16, 256, 256))
    rate = ca_cfar_2d(cells, CfarConfig(p_fa=p_fa)).mean()
    assert 0.8 * p_fa <= rate <= 1.2 * p_fa


small_maps = arrays(np.float64, (12, 15), elements=st.floats(0.0, 100.0, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(small_maps, st.floats(1e-3, 1e3))
def test_cfar_scale_invariance(a, c):
    cfg = CfarConfig(1, 1, 2, 2, p_fa=0.01)
    # power-of-two scaling is exact in floating point; arbitrary c may flip exact ties
    c2 = 2.0 ** np.round(np.log2(c))
    assert np.array_equal(ca_cfar_2d(a, cfg), ca_cfar_2d(a * c2, cfg))


@settings(max_examples=60, deadline=None)
@given(small_maps, st.floats(1e-4, 0.3), st.floats(1e-4, 0.3))
def test_cfar_monotone_in_p_fa(a, p1, p2):
    lo, hi = sorted((p1, p2))
    m_lo = ca_cfar_2d(a, CfarConfig(1, 1, 2, 2, p_fa=lo))
    m_hi = ca_cfar_2d(a, CfarConfig(1, 1, 2, 2, p_fa=hi))
    assert not (m_lo & ~m_hi).any()


def test_scale_invariance_with_general_factor_on_noise():
    rng = np.random.default_rng(2)
    a = rng.exponential(size=(40, 50))
    m = ca_cfar_2d(a, CFAR)
    assert np.array_equal(m, ca_cfar_2d(a * 3.7, CFAR))


def test_map_validation():
    wf = WaveformConfig(n_range_bins=4, n_doppler_bins=4)
    with pytest.raises(ValueError):
        RangeDopplerMap(np.zeros((3, 4)), wf)
    with pytest.raises(ValueError):
        RangeDopplerMap(-np.ones((4, 4)), wf)
    with pytest.raises(ValueError):
        CfarConfig(p_fa=1.5)


# -- axes and trimming ------------------------------------------------------------


def test_bin_to_doppler_table1():
    wf = TABLE1_WAVEFORM
    assert bin_to_doppler(0, wf) == pytest.approx(-43.178, abs=1e-12)
    # the axis is anchored at -max_doppler: 256 * 0.169 = 43.264, so column n/2
    # sits 0.086 m/s above zero and column 255 sits 0.083 below it
    assert bin_to_doppler(256, wf) == pytest.approx(0.086, abs=1e-9)
    assert abs(bin_to_doppler(255, wf)) <= 0.5 * wf.doppler_resolution
    assert bin_to_doppler(256 + 59, wf) == pytest.approx(-43.178 + 315 * 0.169, abs=1e-9)
    assert bin_to_doppler(315, wf) == pytest.approx(10.057, abs=1e-9)
    assert doppler_to_bin(-10.0, wf) == 196
    with pytest.raises(IndexError):
        bin_to_doppler(512, wf)


def test_bin_to_range():
    assert bin_to_range(0, TABLE1_WAVEFORM) == 0.0
    assert bin_to_range(10, TABLE1_WAVEFORM) == pytest.approx(4.9)
    with pytest.raises(IndexError):
        bin_to_range(-1, TABLE1_WAVEFORM)


def test_trim_mask_examples():
    wf = TABLE1_WAVEFORM
    full = np.ones(wf.shape, dtype=bool)
    assert np.array_equal(trim_mask(full, wf, (0.0, 1e9), (-1e9, 1e9)), full)

    m = np.zeros(wf.shape, dtype=bool)
    row3m = int(round(3.0 / wf.range_resolution))
    m[row3m, 200] = True
    assert not trim_mask(m, wf, (5.0, 100.0), (-50.0, 50.0)).any()

    kept = trim_mask(full, wf, (0.0, 1e9), (-15.0, 15.0))
    expected = []
    for c in range(wf.n_doppler_bins):
        v = -43.178 + c * 0.169
        if -15.0 <= v <= 15.0:
            expected.append(c)
    assert np.nonzero(kept.any(axis=0))[0].tolist() == expected
    assert expected[0] == 167 and expected[-1] == 344


# -- voting -------------------------------------------------------------------------


def test_pixel_vote_examples():
    wf = TABLE1_WAVEFORM
    assert pixel_doppler_vote(np.zeros((64, 512), bool), wf) is None
    m = np.zeros((64, 512), bool)
    m[:5, 100] = True
    m[:2, 7] = True
    m[10:12, 300] = True
    assert pixel_doppler_vote(m, wf) == 100


def test_pixel_vote_tie_goes_to_smaller_speed():
    wf = TABLE1_WAVEFORM
    c_neg, c_pos = int(doppler_to_bin(-2.0, wf)), int(doppler_to_bin(1.5, wf))
    assert bin_to_doppler(c_neg, wf) == pytest.approx(-1.942, abs=1e-9)
    assert bin_to_doppler(c_pos, wf) == pytest.approx(1.438, abs=1e-9)
    m = np.zeros((64, 512), bool)
    m[:3, c_neg] = True
    m[10:13, c_pos] = True
    assert pixel_doppler_vote(m, wf) == c_pos


def test_pixel_vote_exhaustive_small_masks():
    # 5 columns spanning -0.3..+0.5 m/s; enumerate every 2x5 mask
    wf = WaveformConfig(max_doppler=0.3, doppler_resolution=0.2, n_range_bins=2, n_doppler_bins=5)
    speeds = -0.3 + 0.2 * np.arange(5)
    for bits in itertools.product([False, True], repeat=10):
        m = np.array(bits).reshape(2, 5)
        counts = m.sum(axis=0)
        if counts.max() == 0:
            expected = None
        else:
            best = [c for c in range(5) if counts[c] == counts.max()]
            expected = min(best, key=lambda c: (abs(speeds[c]), c))
        assert pixel_doppler_vote(m, wf) == expected


def test_beam_consensus_examples():
    assert beam_consensus([100, 100, 100, 87], 3) == (100, 3)
    assert beam_consensus([100, 87, 53], 2) is None
    assert beam_consensus([None] * 12, 1) is None
    assert beam_consensus([5, None, 5, None], 2) == (5, 2)


def test_beam_consensus_tie_prefers_smaller_speed():
    wf = TABLE1_WAVEFORM
    slow, fast = int(doppler_to_bin(-1.0, wf)), int(doppler_to_bin(-9.0, wf))
    assert beam_consensus([fast] * 4 + [slow] * 4, 4, wf) == (slow, 4)


def test_beam_consensus_monte_carlo():
    rng = np.random.default_rng(5)
    hits = 0
    for _ in range(1000):
        votes = [300] * 7 + rng.integers(0, 512, size=5).tolist()
        rng.shuffle(votes)
        r = beam_consensus(votes, 4, TABLE1_WAVEFORM)
        hits += r is not None and r[0] == 300
    assert hits >= 990


# -- full beams ---------------------------------------------------------------------


def _beam(speed, seed=0, targets=True):
    profile = TrajectoryProfile((Segment(1.0),), initial_speed=speed)
    st_ = profile.state_at(np.array([0.5]))
    rng = np.random.default_rng(seed)
    if targets:
        xy = np.column_stack([rng.uniform(3, 28, 60), rng.uniform(-1.0, 1.0, 60)])
        scene = SceneModel(np.column_stack([xy + st_.positions[0, :2], np.full(60, 0.3)]), np.full(60, 2000.0))
    else:
        scene = SceneModel()
    return simulate_radar_beam(st_, scene, WF64, 0.0, -2.5, rng, Extrinsics())


def _process(beam, cfg=CFAR):
    return process_beam(beam, cfg, RANGE_BOUNDS, DOPPLER_BOUNDS, 4)


def test_process_beam_forward_motion():
    for seed in range(5):
        m = _process(_beam(10.0, seed))
        assert m is not None
        assert abs(m.radial_speed - (-10.0)) <= 0.169
        assert m.n_votes >= 4 and m.azimuth == 0.0 and m.elevation == -2.5


def test_process_beam_static():
    m = _process(_beam(0.0, 3))
    assert m is not None and abs(m.radial_speed) <= 0.169


def test_process_beam_pure_noise_is_rejected():
    rng = np.random.default_rng(9)
    absent = 0
    for k in range(200):
        pixels = rng.exponential(size=(12, *WF64.shape))
        beam = BeamMeasurement(pixels, WF64, 0.0, -2.5, 0.01 * k)
        absent += _process(beam) is None
    assert absent >= 190


def test_process_beam_deterministic():
    beam = _beam(7.0, 11)
    assert _process(beam) == _process(beam)


def test_process_beam_empty_trim_window():
    beam = _beam(7.0, 2)
    assert process_beam(beam, CFAR, (200.0, 300.0), DOPPLER_BOUNDS, 4) is None


def test_doppler_to_forward_velocity_examples():
    def m(vd, az):
        return DopplerMeasurement(vd, az, 0.0, 0.0, 12)

    assert doppler_to_forward_velocity(m(-10.0, 0.0)) == pytest.approx(10.0)
    assert doppler_to_forward_velocity(m(-5.0, 60.0)) == pytest.approx(10.0)
    assert doppler_to_forward_velocity(m(0.0, 33.0)) == 0.0
    with pytest.raises(ValueError):
        doppler_to_forward_velocity(m(-1.0, 90.0))


def test_beam_layout_validation():
    with pytest.raises(ValueError):
        BeamMeasurement(np.zeros((11, *WF64.shape)), WF64, 0.0, 0.0, 0.0)
    b = BeamMeasurement(np.zeros((12, *WF64.shape)), WF64, 10.0, -2.5, 0.0)
    assert b.pixel_angles(0) == (8.5, 0.0)
    assert b.pixel_angles(11) == (11.5, -5.0)
