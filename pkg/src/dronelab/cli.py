"""``dronelab`` command line: races, track metrics, log evaluation and datasets.

Exit codes: 0 success (a race with a disqualification still succeeds),
1 unexpected failure, 2 invalid configuration, 3 I/O failure, 4 malformed
telemetry log.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .baseline_opponents import OpponentKind
from .core_types import TrackFormatError, Track, load_track
from .environment_geometry import GeometryError, build_sdf, build_voxel_grid, write_sdf, write_voxel_grid
from .race_orchestrator import InvalidConfig, MalformedLog, SinkWriteFailure, evaluate_log, format_leaderboard
from .sensor_sim import CameraModel

log = logging.getLogger("dronelab")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MALFORMED_LOG = 4

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
IMAGE_SIZE = (320, 240)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# argument types
# ---------------------------------------------------------------------------

def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> float:
    v = _finite(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive: {text}")
    return v


def _non_negative(text: str) -> float:
    v = _finite(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative: {text}")
    return v


def _finite(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"must be finite: {text}")
    return v


def _fov(text: str) -> float:
    v = _finite(text)
    if not 0 < v < 180:
        raise argparse.ArgumentTypeError("field of view must lie in (0, 180) degrees")
    return v


def _count(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dronelab", description="Drone racing simulation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def track_arg(p):
        p.add_argument("--track", required=True, type=Path, help="track JSON file")

    def camera_arg(p):
        p.add_argument("--camera-fov-deg", type=_fov, default=90.0,
                       help=f"horizontal field of view of the {IMAGE_SIZE[0]}x{IMAGE_SIZE[1]} camera (default 90)")

    def seed_arg(p):
        p.add_argument("--seed", type=_u64, default=0, help="64-bit seed for every random stream (default 0)")

    def dt_arg(p):
        p.add_argument("--dt", type=_positive, default=0.005, help="simulation step in seconds (default 0.005)")

    p = sub.add_parser("race", help="run one race and write its telemetry log")
    track_arg(p)
    p.add_argument("--tier", type=int, choices=(1, 2, 3), default=1,
                   help="1 planning (true gates), 2 perception (noisy gates, no opponent), 3 both")
    p.add_argument("--opponent", choices=[k.value for k in OpponentKind], default="none", help="opponent racer")
    seed_arg(p)
    p.add_argument("--out", required=True, type=Path, help="telemetry log path")
    p.add_argument("--noise-sigma", type=_non_negative, default=1.0,
                   help="std dev of reported gate positions in metres for tiers 2 and 3 (default 1)")
    camera_arg(p)
    dt_arg(p)
    p.set_defaults(func=cmd_race)

    p = sub.add_parser("metrics", help="curvature and visibility profiles of a track")
    track_arg(p)
    camera_arg(p)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("evaluate", help="recompute the leaderboard from a telemetry log")
    p.add_argument("log", type=Path, help="telemetry log written by 'race'")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("dataset", help="render a randomised gate image dataset")
    track_arg(p)
    p.add_argument("--frames", type=_count, default=10, help="number of frames (default 10)")
    seed_arg(p)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    camera_arg(p)
    dt_arg(p)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("voxelize", help="occupancy grid and signed distance field of the gate frames")
    track_arg(p)
    p.add_argument("--resolution", type=_positive, default=0.25, help="voxel edge in metres (default 0.25)")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("perceive-eval", help="score the gate detector along a flight")
    track_arg(p)
    seed_arg(p)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--noise-sigma", type=_non_negative, default=0.0,
                   help="std dev of added corner noise in pixels (default 0)")
    p.add_argument("--n-measurements", type=_count, default=1000, help="detections to collect (default 1000)")
    camera_arg(p)
    dt_arg(p)
    p.set_defaults(func=cmd_perceive_eval)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load(path: Path) -> Track:
    try:
        return load_track(path)
    except (TrackFormatError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid track {path}: {exc}") from exc


def _camera(fov_deg: float) -> CameraModel:
    return CameraModel.from_fov(IMAGE_SIZE[0], IMAGE_SIZE[1], fov_deg)


def _out_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_race(args) -> int:
    from .plotting import log_trajectories, plot_race
    from .racers import build_race, run_race

    track = _load(args.track)
    if args.dt > 0.02:
        raise ConfigError("--dt must not exceed 0.02 s")
    config, racers = build_race(track, args.tier, args.opponent, args.seed, noise_sigma=args.noise_sigma,
                                dt=args.dt, camera=_camera(args.camera_fov_deg))
    config.validate()
    if args.out.parent != Path(""):
        args.out.parent.mkdir(parents=True, exist_ok=True)
    log.info("racing %s tier %d against %s, seed %d", track.name, args.tier, args.opponent, args.seed)
    outcome = run_race(config, racers, args.out)
    board = format_leaderboard(outcome.progress.values(), config.cutoff_time)
    sys.stdout.write(board)
    stem = args.out.with_suffix("")
    Path(f"{stem}_leaderboard.csv").write_text(board.replace(" ", ","))
    plot_race(track, log_trajectories(args.out.read_text()), f"{stem}_paths.png")
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .plotting import plot_curvature, plot_visibility
    from .track_metrics import complexity_report, write_report_csvs

    track = _load(args.track)
    out = _out_dir(args.out)
    report = complexity_report(track, _camera(args.camera_fov_deg))
    paths = write_report_csvs(report, out)
    plot_curvature(report, Path(paths["curvature"]).with_suffix(".png"))
    plot_visibility(report, Path(paths["visibility"]).with_suffix(".png"))
    print("track,curvature_metric,length_m")
    print(report.summary_line())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    text = args.log.read_text()
    ranking, parsed = evaluate_log(text)
    if parsed.truncated:
        print(f"warning: {args.log}: last line is incomplete; ranking covers the first "
              f"{parsed.n_lines} complete records", file=sys.stderr)
    log.info("ranking %s", ranking)
    sys.stdout.write(format_leaderboard(parsed.progress.values(), parsed.cutoff))
    return EXIT_OK


def cmd_dataset(args) -> int:
    from .datasets import generate_dataset

    track = _load(args.track)
    rows = generate_dataset(track, args.frames, args.seed, _out_dir(args.out), _camera(args.camera_fov_deg),
                            args.dt)
    print(f"wrote {len(rows)} frames to {args.out}")
    return EXIT_OK


def cmd_voxelize(args) -> int:
    from .plotting import plot_sdf_slice

    track = _load(args.track)
    out = _out_dir(args.out)
    try:
        grid = build_voxel_grid(track, args.resolution)
    except GeometryError as exc:
        raise ConfigError(str(exc)) from exc
    sdf = build_sdf(grid)
    write_voxel_grid(grid, out / f"{track.name}.voxgrid")
    write_sdf(sdf, out / f"{track.name}.sdf")
    nx, ny, nz = grid.dims
    occupied = int(grid.occupancy.sum())
    with open(out / f"{track.name}_voxels.csv", "w") as fh:
        fh.write("track,resolution_m,nx,ny,nz,occupied,min_distance_m,max_distance_m\n")
        fh.write(f"{track.name},{grid.resolution:g},{nx},{ny},{nz},{occupied},"
                 f"{float(sdf.distance.min()):.6f},{float(sdf.distance.max()):.6f}\n")
    z_gate = int(np.clip((track.gates[0].center[2] - grid.origin[2]) / grid.resolution - 0.5, 0, nz - 1))
    plot_sdf_slice(sdf.distance, sdf.origin, sdf.resolution, out / f"{track.name}_sdf_slice.png", z_gate)
    print(f"{track.name}: {nx}x{ny}x{nz} voxels, {occupied} occupied")
    return EXIT_OK


def cmd_perceive_eval(args) -> int:
    from .perception_baseline import evaluate_perception, format_summary, write_perception_csv
    from .plotting import plot_perception_errors

    track = _load(args.track)
    out = _out_dir(args.out)
    report = evaluate_perception(track, _camera(args.camera_fov_deg), args.n_measurements, args.seed,
                                 corner_noise_px=args.noise_sigma, dt=args.dt)
    write_perception_csv(report, out / f"{track.name}_perception.csv")
    plot_perception_errors(report.errors, report.filtered_errors, out / f"{track.name}_perception.png")
    summary = format_summary(report)
    (out / f"{track.name}_perception_summary.json").write_text(summary + "\n")
    print(summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _setup_logging() -> None:
    name = os.environ.get("DRL_LOG_LEVEL", "warn").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"DRL_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 for --help
        return int(exc.code or 0)
    try:
        _setup_logging()
        return args.func(args)
    except (ConfigError, InvalidConfig) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MalformedLog as exc:
        print(f"error: {args.log}: {exc}", file=sys.stderr)
        return EXIT_MALFORMED_LOG
    except (OSError, SinkWriteFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - last resort, keep the message
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
