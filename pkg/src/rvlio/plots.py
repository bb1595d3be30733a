"""Static SVG figures for an experiment run: XY path, forward velocity, squared error."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no date keep SVG output byte-identical across runs
SVG_METADATA = {"Date": None, "Creator": None}
COLORS = {"truth": "black", "LI": "tab:blue", "RI": "tab:green", "LRI": "tab:red"}


def _save(fig, path: Path) -> None:
    with plt.rc_context({"svg.hashsalt": "rvlio", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)


def _shade_dropout(ax, windows) -> None:
    for a, b in windows:
        ax.axvspan(a, b, color="0.85", zorder=0, label="LiDAR dropout")


def write_plots(result, out: Path) -> list[Path]:
    truth = result.streams.truth
    windows = result.config.dropout
    paths = []

    fig, ax = plt.subplots(figsize=(6, 5))
    ax.plot(truth.positions[:, 0], truth.positions[:, 1], color=COLORS["truth"], lw=1.5, label="truth")
    for m, run in result.runs.items():
        p = run.estimate.positions
        ax.plot(p[:, 0], p[:, 1], color=COLORS.get(m), lw=1, label=m)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend()
    paths.append(out / "path_xy.svg")
    _save(fig, paths[-1])

    fig, ax = plt.subplots(figsize=(8, 4))
    _shade_dropout(ax, windows)
    ax.plot(truth.timestamps, truth.forward_velocity(), color=COLORS["truth"], lw=1.5, label="truth")
    for m, run in result.runs.items():
        ax.plot(run.estimate.timestamps, run.estimate.forward_velocity(), color=COLORS.get(m), lw=1, label=m)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("forward velocity [m/s]")
    ax.legend()
    paths.append(out / "forward_velocity.svg")
    _save(fig, paths[-1])

    fig, ax = plt.subplots(figsize=(8, 4))
    _shade_dropout(ax, windows)
    for m, run in result.runs.items():
        s = run.report.vel_series
        if s is not None:
            ax.plot(s.times, s.errors**2, color=COLORS.get(m), lw=1, label=m)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("squared forward-velocity error [m²/s²]")
    ax.legend()
    paths.append(out / "velocity_sq_error.svg")
    _save(fig, paths[-1])
    return paths
