"""Range-doppler map processing: CA-CFAR, trimming, voting, beam consensus.

Axis conventions
----------------
Rows are range bins, ``range(r) = r * range_resolution``. Columns are doppler
bins, ``doppler(c) = -max_doppler + c * doppler_resolution``; column 0 is the
most negative radial speed. Intensities are linear power, never dB.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class WaveformConfig:
    max_range: float = 100.0
    range_resolution: float = 0.49
    max_doppler: float = 43.178
    doppler_resolution: float = 0.169
    beam_sampling_time: float = 0.0158
    n_range_bins: int = 256
    n_doppler_bins: int = 512

    def __post_init__(self):
        if self.range_resolution <= 0 or self.doppler_resolution <= 0:
            raise ValueError("resolutions must be positive")
        if self.n_range_bins < 1 or self.n_doppler_bins < 1:
            raise ValueError("bin counts must be positive")
        if self.max_doppler <= 0 or self.max_range <= 0:
            raise ValueError("max_range and max_doppler must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_range_bins, self.n_doppler_bins)

    def range_axis(self) -> np.ndarray:
        return np.arange(self.n_range_bins) * self.range_resolution

    def doppler_axis(self) -> np.ndarray:
        return -self.max_doppler + np.arange(self.n_doppler_bins) * self.doppler_resolution


# Echodrive S21a chirp; the doppler axis needs 512 columns to span +-43.178 m/s
TABLE1_WAVEFORM = WaveformConfig()


@dataclass(frozen=True)
class CfarConfig:
    """2D CA-CFAR window, sizes are cells per side."""

    guard_cells_range: int = 2
    guard_cells_doppler: int = 2
    reference_cells_range: int = 8
    reference_cells_doppler: int = 8
    p_fa: float = 1e-3

    def __post_init__(self):
        sizes = (
            self.guard_cells_range,
            self.guard_cells_doppler,
            self.reference_cells_range,
            self.reference_cells_doppler,
        )
        if min(sizes) < 0:
            raise ValueError("guard and reference cell counts must be >= 0")
        if not 0.0 < self.p_fa < 1.0:
            raise ValueError(f"p_fa must lie in (0, 1), got {self.p_fa}")
        if self.n_reference < 1:
            raise ValueError("CFAR window has no reference cells")

    @property
    def n_reference(self) -> int:
        outer = (2 * (self.guard_cells_range + self.reference_cells_range) + 1) * (
            2 * (self.guard_cells_doppler + self.reference_cells_doppler) + 1
        )
        inner = (2 * self.guard_cells_range + 1) * (2 * self.guard_cells_doppler + 1)
        return outer - inner


@dataclass(frozen=True)
class RangeDopplerMap:
    intensities: np.ndarray
    waveform: WaveformConfig

    def __post_init__(self):
        a = np.asarray(self.intensities, dtype=float)
        if a.shape != self.waveform.shape:
            raise ValueError(f"map shape {a.shape} does not match waveform {self.waveform.shape}")
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ValueError("intensities must be finite and non-negative")
        object.__setattr__(self, "intensities", a)


PIXEL_AZIMUTH_OFFSETS = np.array([-1.5, -0.5, 0.5, 1.5])
PIXEL_ELEVATION_OFFSETS = np.array([2.5, 0.0, -2.5])


@dataclass
class BeamMeasurement:
    """One beam: 12 pixel maps stored row-major (3 elevation rows x 4 azimuth columns).

    ``pixels`` has shape ``(12, n_range_bins, n_doppler_bins)``; pixel ``k``
    looks along ``pixel_elevations[k // 4]`` and ``pixel_azimuths[k % 4]``.
    """

    pixels: np.ndarray
    waveform: WaveformConfig
    beam_center_azimuth: float
    beam_center_elevation: float
    timestamp: float
    pixel_azimuths: np.ndarray = field(default=None)
    pixel_elevations: np.ndarray = field(default=None)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.shape != (12, *self.waveform.shape):
            raise ValueError(f"beam must hold 12 maps of shape {self.waveform.shape}")
        if self.pixel_azimuths is None:
            self.pixel_azimuths = self.beam_center_azimuth + PIXEL_AZIMUTH_OFFSETS
        if self.pixel_elevations is None:
            self.pixel_elevations = self.beam_center_elevation + PIXEL_ELEVATION_OFFSETS
        self.pixel_azimuths = np.asarray(self.pixel_azimuths, dtype=float)
        self.pixel_elevations = np.asarray(self.pixel_elevations, dtype=float)
        if self.pixel_azimuths.shape != (4,) or self.pixel_elevations.shape != (3,):
            raise ValueError("pixel layout must be 4 azimuths x 3 elevations")

    def pixel(self, k: int) -> RangeDopplerMap:
        return RangeDopplerMap(self.pixels[k], self.waveform)

    def pixel_angles(self, k: int) -> tuple[float, float]:
        """(azimuth, elevation) in degrees of pixel ``k``."""
        return float(self.pixel_azimuths[k % 4]), float(self.pixel_elevations[k // 4])


@dataclass(frozen=True)
class DopplerMeasurement:
    radial_speed: float
    azimuth: float
    elevation: float
    timestamp: float
    n_votes: int
    column: int = -1


@dataclass(frozen=True)
class RadarProcessingConfig:
    cfar: CfarConfig = CfarConfig()
    range_bounds: tuple[float, float] = (1.0, 30.0)
    doppler_bounds: tuple[float, float] = (-15.0, 3.0)
    min_votes: int = 4


def cfar_threshold_scale(n_reference, p_fa: float):
    """CA-CFAR threshold multiplier ``N * (p_fa ** (-1/N) - 1)``.

    Accepts an array of reference counts (used for shrunken border windows).
    """
    if not 0.0 < p_fa < 1.0:
        raise ValueError(f"p_fa must lie in (0, 1), got {p_fa}")
    n = np.asarray(n_reference, dtype=float)
    if np.any(n < 1):
        raise ValueError("need at least one reference cell")
    # expm1 keeps precision for large N where p_fa**(-1/N) is close to 1
    alpha = n * np.expm1(-np.log(p_fa) / n)
    return float(alpha) if alpha.ndim == 0 else alpha


def _prefix(a: np.ndarray, axis: int) -> np.ndarray:
    # zero-padded float64 cumulative sum, so window sums are c[hi] - c[lo]
    shape = list(a.shape)
    shape[axis] += 1
    out = np.zeros(shape)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(1, None)
    np.cumsum(a, axis=axis, out=out[tuple(idx)])
    return out


def _cfar_block(
    intensities: np.ndarray, cfg: CfarConfig, rows: tuple[int, int], cols: tuple[int, int]
) -> np.ndarray:
    """Detections for cells ``rows x cols`` of ``intensities[..., nr, nc]``.

    Only a margin of one window half-width around the block is read, so the
    result is identical to running over the whole map and cropping.
    """
    nr, nc = intensities.shape[-2:]
    gr, gd = cfg.guard_cells_range, cfg.guard_cells_doppler
    mr = gr + cfg.reference_cells_range
    md = gd + cfg.reference_cells_doppler
    r0, r1 = rows
    c0, c1 = cols
    pr0, pr1 = max(r0 - mr, 0), min(r1 + mr, nr)
    pc0, pc1 = max(c0 - md, 0), min(c1 + md, nc)
    sub = intensities[..., pr0:pr1, pc0:pc1]

    r = np.arange(r0, r1)
    c = np.arange(c0, c1)
    o_rl, o_rh = np.clip(r - mr, 0, nr), np.clip(r + mr + 1, 0, nr)
    i_rl, i_rh = np.clip(r - gr, 0, nr), np.clip(r + gr + 1, 0, nr)
    o_cl, o_ch = np.clip(c - md, 0, nc), np.clip(c + md + 1, 0, nc)
    i_cl, i_ch = np.clip(c - gd, 0, nc), np.clip(c + gd + 1, 0, nc)

    # separable box sums: along range first, then along doppler
    cr = _prefix(sub, -2)
    outer_r = np.take(cr, o_rh - pr0, axis=-2) - np.take(cr, o_rl - pr0, axis=-2)
    inner_r = np.take(cr, i_rh - pr0, axis=-2) - np.take(cr, i_rl - pr0, axis=-2)
    co = _prefix(outer_r, -1)
    ci = _prefix(inner_r, -1)
    outer = np.take(co, o_ch - pc0, axis=-1) - np.take(co, o_cl - pc0, axis=-1)
    inner = np.take(ci, i_ch - pc0, axis=-1) - np.take(ci, i_cl - pc0, axis=-1)
    count = np.outer(o_rh - o_rl, o_ch - o_cl) - np.outer(i_rh - i_rl, i_ch - i_cl)

    valid = count >= 1
    n = np.where(valid, count, 1)
    alpha = cfar_threshold_scale(n, cfg.p_fa)
    cut = intensities[..., r0:r1, c0:c1]
    # compare cut * n > alpha * sum, avoiding a division per cell
    return (cut * n > alpha * (outer - inner)) & valid


def ca_cfar_2d(
    rd_map: RangeDopplerMap | np.ndarray,
    cfg: CfarConfig,
    rows: tuple[int, int] | None = None,
    cols: tuple[int, int] | None = None,
) -> np.ndarray:
    """Boolean detection mask with the same shape as the map.

    A cell is a detection iff its intensity exceeds ``alpha * mean(reference
    cells)``, the reference cells being a rectangular ring outside the guard
    cells. Near borders the ring is clipped to the map and ``alpha`` is
    recomputed for the actual reference count. ``rows``/``cols`` restrict
    evaluation to a half-open block; cells outside it are reported as False.
    Leading batch dimensions are allowed when passing a raw array.
    """
    a = rd_map.intensities if isinstance(rd_map, RangeDopplerMap) else np.asarray(rd_map)
    nr, nc = a.shape[-2:]
    rows = rows or (0, nr)
    cols = cols or (0, nc)
    mask = np.zeros(a.shape, dtype=bool)
    if rows[1] <= rows[0] or cols[1] <= cols[0]:
        return mask
    mask[..., rows[0] : rows[1], cols[0] : cols[1]] = _cfar_block(a, cfg, rows, cols)
    return mask


def bin_to_doppler(column, waveform: WaveformConfig):
    c = np.asarray(column)
    if np.any(c < 0) or np.any(c >= waveform.n_doppler_bins):
        raise IndexError(f"doppler column {column} outside [0, {waveform.n_doppler_bins})")
    v = -waveform.max_doppler + c * waveform.doppler_resolution
    return float(v) if v.ndim == 0 else v


def bin_to_range(row, waveform: WaveformConfig):
    r = np.asarray(row)
    if np.any(r < 0) or np.any(r >= waveform.n_range_bins):
        raise IndexError(f"range row {row} outside [0, {waveform.n_range_bins})")
    out = r * waveform.range_resolution
    return float(out) if out.ndim == 0 else out


def doppler_to_bin(speed, waveform: WaveformConfig):
    """Nearest doppler column for a radial speed (unclipped)."""
    return np.rint((np.asarray(speed) + waveform.max_doppler) / waveform.doppler_resolution).astype(int)


def range_to_bin(rng, waveform: WaveformConfig):
    return np.rint(np.asarray(rng) / waveform.range_resolution).astype(int)


def trim_bounds_to_slices(
    waveform: WaveformConfig,
    range_bounds: tuple[float, float],
    doppler_bounds: tuple[float, float],
) -> tuple[tuple[int, int], tuple[int, int]]:
    """Half-open (row, column) index ranges whose physical values lie inside the bounds."""
    (rmin, rmax), (dmin, dmax) = range_bounds, doppler_bounds
    if rmin > rmax or dmin > dmax:
        raise ValueError("trim bounds are inverted")
    eps = 1e-9
    rng = waveform.range_axis()
    dop = waveform.doppler_axis()
    rows = np.nonzero((rng >= rmin - eps) & (rng <= rmax + eps))[0]
    cols = np.nonzero((dop >= dmin - eps) & (dop <= dmax + eps))[0]
    r = (int(rows[0]), int(rows[-1]) + 1) if rows.size else (0, 0)
    c = (int(cols[0]), int(cols[-1]) + 1) if cols.size else (0, 0)
    return r, c


def trim_mask(
    mask: np.ndarray,
    waveform: WaveformConfig,
    range_bounds: tuple[float, float],
    doppler_bounds: tuple[float, float],
) -> np.ndarray:
    """Clear detections outside the range/doppler envelope (bounds inclusive)."""
    (r0, r1), (c0, c1) = trim_bounds_to_slices(waveform, range_bounds, doppler_bounds)
    out = np.zeros_like(mask, dtype=bool)
    out[..., r0:r1, c0:c1] = mask[..., r0:r1, c0:c1]
    return out


def _tie_key(waveform: WaveformConfig | None, n_cols: int | None = None):
    if waveform is None:
        # without axis metadata assume zero doppler sits at the centre column
        center = (n_cols or 0) / 2
        return lambda col: (abs(col - center), col)
    return lambda col: (abs(-waveform.max_doppler + col * waveform.doppler_resolution), col)


def _vote_from_counts(counts: np.ndarray, key, offset: int = 0) -> int | None:
    best = counts.max() if counts.size else 0
    if best == 0:
        return None
    candidates = np.nonzero(counts == best)[0] + offset
    return int(min(candidates, key=key))


def pixel_doppler_vote(mask: np.ndarray, waveform: WaveformConfig | None = None) -> int | None:
    """Column with the most detections; ties go to the smallest |doppler|."""
    counts = np.asarray(mask, dtype=bool).sum(axis=0)
    return _vote_from_counts(counts, _tie_key(waveform, counts.size))


def beam_consensus(
    votes, min_votes: int, waveform: WaveformConfig | None = None
) -> tuple[int, int] | None:
    """Mode of the pixel votes as ``(column, multiplicity)``.

    ``None`` votes are ignored. Returns None when the mode has fewer than
    ``min_votes`` supporters.
    """
    counter = Counter(v for v in votes if v is not None)
    if not counter:
        return None
    best = max(counter.values())
    if best < min_votes:
        return None
    key = _tie_key(waveform)
    column = min((c for c, n in counter.items() if n == best), key=key)
    return int(column), best


def process_beam(
    beam: BeamMeasurement,
    cfg: CfarConfig,
    range_bounds: tuple[float, float],
    doppler_bounds: tuple[float, float],
    min_votes: int,
) -> DopplerMeasurement | None:
    """Condense one beam into a radial-speed measurement, or None if no consensus."""
    wf = beam.waveform
    rows, cols = trim_bounds_to_slices(wf, range_bounds, doppler_bounds)
    # CFAR is evaluated only inside the trim window; reference cells still
    # come from the full map, so this equals detect-then-trim
    if rows[1] <= rows[0] or cols[1] <= cols[0]:
        return None
    block = _cfar_block(beam.pixels, cfg, rows, cols)
    counts = block.sum(axis=-2)
    key = _tie_key(wf)
    votes = [_vote_from_counts(counts[k], key, cols[0]) for k in range(counts.shape[0])]
    result = beam_consensus(votes, min_votes, wf)
    if result is None:
        return None
    column, n_votes = result
    return DopplerMeasurement(
        radial_speed=bin_to_doppler(column, wf),
        azimuth=beam.beam_center_azimuth,
        elevation=beam.beam_center_elevation,
        timestamp=beam.timestamp,
        n_votes=n_votes,
        column=column,
    )


def process_beam_with(beam: BeamMeasurement, config: RadarProcessingConfig) -> DopplerMeasurement | None:
    return process_beam(beam, config.cfar, config.range_bounds, config.doppler_bounds, config.min_votes)


def doppler_to_forward_velocity(m: DopplerMeasurement) -> float:
    """Radar-frame forward speed assuming no lateral motion and zero elevation."""
    if abs(m.azimuth) >= 90.0:
        raise ValueError(f"azimuth {m.azimuth} deg gives no forward projection")
    return -m.radial_speed / np.cos(np.deg2rad(m.azimuth))
