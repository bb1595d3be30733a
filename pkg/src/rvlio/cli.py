"""Command-line entry point: ``rvlio run | compare | simulate-only | process-radar-only``.

Exit codes: 0 success, 1 estimator did not converge (artifacts written and
flagged in the manifest), 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

from rvlio import formats
from rvlio.evaluation import MetricReport

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("rvlio")


def _parse_dropout(text: str) -> tuple:
    """``"15:30,40:45"`` -> ((15, 30), (40, 45)); an empty string means no dropout."""
    windows = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            a, b = part.split(":")
            windows.append((float(a), float(b)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad dropout window {part!r}, expected start:end") from None
    return tuple(windows)


def _parse_modalities(text: str) -> tuple:
    return tuple(m.strip().upper() for m in text.split(",") if m.strip())


def _load(args):
    from rvlio.experiment import ExperimentConfig, config_from_dict, load_config

    cfg = load_config(args.config) if args.config else config_from_dict({})
    seed = os.environ.get("RVLIO_SEED")
    out = os.environ.get("RVLIO_OUT")
    if seed is not None:
        try:
            seed = int(seed)
        except ValueError:
            raise SystemExit(_usage(f"RVLIO_SEED must be an integer, got {seed!r}")) from None
    cfg = cfg.with_overrides(seed=seed, output=out)
    cfg = cfg.with_overrides(
        seed=getattr(args, "seed", None),
        output=getattr(args, "out", None),
        modalities=getattr(args, "modalities", None),
        dropout=getattr(args, "dropout", None),
    )
    assert isinstance(cfg, ExperimentConfig)
    return cfg


def _usage(msg: str) -> int:
    print(f"rvlio: error: {msg}", file=sys.stderr)
    return EXIT_USAGE


def cmd_run(args) -> int:
    from rvlio.experiment import run_experiment

    cfg = _load(args)
    out = Path(cfg.output)
    result = run_experiment(cfg, out)
    for m, run in result.runs.items():
        r = run.report
        print(f"{m:4s} rpe {r.rpe_rmse:.4f} +- {r.rpe_std:.4f}   vel {r.vel_rmse:.4f} +- {r.vel_std:.4f} m/s")
    print(f"artifacts in {out}")
    if not result.converged:
        bad = {m: r.stats.not_converged for m, r in result.runs.items() if not r.converged}
        print(f"rvlio: estimator did not converge on some updates {bad}; outputs flagged partial", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def compare_reports(reports: list[MetricReport], labels: list[str]) -> str:
    """Aligned text table; '*' marks the best (lowest) value per column, '=' a shared best."""
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    keys = MetricReport.KEYS
    best = {}
    for k in keys:
        vals = [getattr(r, k) for r in reports]
        finite = [v for v in vals if math.isfinite(v)]
        best[k] = min(finite) if finite else None
    width = max(8, *(len(s) for s in labels))
    lines = [f"{'method':<{width}}" + "".join(f"{k:>14s}" for k in keys)]
    ties = []
    for k in keys:
        if best[k] is not None and sum(getattr(r, k) == best[k] for r in reports) > 1:
            ties.append(k)
    for label, r in zip(labels, reports):
        cells = []
        for k in keys:
            v = getattr(r, k)
            mark = " "
            if v == best[k]:
                mark = "=" if k in ties else "*"
            cells.append(f"{v:13.4f}{mark}")
        lines.append(f"{label:<{width}}" + "".join(cells))
    lines.append("* best   = tied for best" + (f" ({', '.join(ties)})" if ties else ""))
    return "\n".join(lines)


def cmd_compare(args) -> int:
    import json

    if len(args.reports) < 2:
        return _usage("compare needs at least two report files")
    raw = []
    for p in args.reports:
        try:
            raw.append(json.loads(Path(p).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            return _usage(f"cannot read report {p}: {exc}")
    key_sets = [frozenset(k for k in d if k != "metadata") for d in raw]
    if len(set(key_sets)) > 1 or not set(MetricReport.KEYS) <= key_sets[0]:
        return _usage("reports have mismatched metric keys: " + "; ".join(",".join(sorted(s)) for s in key_sets))
    reports = [MetricReport.from_dict(d) for d in raw]
    labels = [r.label or Path(p).stem for r, p in zip(reports, args.reports)]
    print(compare_reports(reports, labels))
    return EXIT_OK


def cmd_simulate(args) -> int:
    from rvlio.experiment import simulate_beams, simulate_streams

    cfg = _load(args)
    out = Path(cfg.output)
    streams = simulate_streams(cfg)
    formats.write_trajectory(out / "truth.csv", streams.truth)
    formats.write_imu(out / "imu.csv", streams.imu)
    formats.write_lidar(out / "lidar.csv", streams.lidar)
    n = cfg.radar.save_beams
    if n:
        beams = []
        for beam in simulate_beams(cfg):
            beams.append(beam)
            if len(beams) >= n:
                break
        formats.write_beams(out / "beams.npz", beams)
    formats.write_json(out / "config.json", cfg.reproducible_dict())
    print(f"wrote {len(streams.imu)} IMU, {len(streams.lidar)} LiDAR, {n} radar beams to {out}")
    return EXIT_OK


def cmd_process_radar(args) -> int:
    from rvlio.radar_dsp import process_beam

    cfg = _load(args)
    r = cfg.radar
    beams = formats.read_beams(args.beams)
    cfar = r.cfar()
    out = [m for m in (process_beam(b, cfar, r.range_bounds, r.doppler_bounds, r.min_votes) for b in beams) if m]
    target = Path(args.out) if args.out else Path(cfg.output) / "radar_doppler.csv"
    formats.write_doppler(target, out)
    print(f"{len(out)}/{len(beams)} beams gave a consensus measurement; wrote {target}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rvlio", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", help="YAML experiment config (defaults built in)")
        sp.add_argument("--seed", type=int, help="overrides config and RVLIO_SEED")
        sp.add_argument("--out", help=out_help + "; overrides config and RVLIO_OUT")

    sp = sub.add_parser("run", help="simulate, process radar, estimate, evaluate, write artifacts")
    common(sp)
    sp.add_argument("--modalities", type=_parse_modalities, help="comma list of LI, RI, LRI")
    sp.add_argument("--dropout", type=_parse_dropout, help="LiDAR dropout windows, e.g. 15:30,40:45")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("compare", help="side-by-side table of metric reports")
    sp.add_argument("reports", nargs="*", help="two or more metrics JSON files")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("simulate-only", help="write simulated sensor streams and a beam file")
    common(sp)
    sp.add_argument("--dropout", type=_parse_dropout, help="LiDAR dropout windows, e.g. 15:30")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("process-radar-only", help="beam file -> doppler measurements CSV")
    sp.add_argument("beams", help=".npz beam file")
    common(sp, out_help="output CSV path")
    sp.set_defaults(func=cmd_process_radar)
    return p


def main(argv=None) -> int:
    from rvlio.experiment import ConfigError
    from rvlio.formats import FormatError

    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        return _usage(str(exc))
    except FileNotFoundError as exc:
        return _usage(f"file not found: {exc.filename}")


if __name__ == "__main__":
    sys.exit(main())
