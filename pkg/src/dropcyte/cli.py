"""Command-line entry point.

Subcommands map onto the pipeline run modes; flags override values from an
optional --config file. Exit codes: 0 success, 1 usage or configuration
error, 2 no processable input, 3 run completed with frame-level warnings.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from dropcyte.pipeline import (
    CalibrationJob,
    ConfigError,
    PipelineConfig,
    _parse_roi,
    load_config,
    run_batch,
    run_calibrate,
    run_stream,
    run_synth,
)

_ANALYZE_MODES = {
    "analyze-brightfield": "brightfield",
    "analyze-fluorescence": "fluorescence",
    "register": "register",
    "calibrate": "calibrate",
    "synth": "synth",
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1, not 2."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _add_common(sub: argparse.ArgumentParser):
    sub.add_argument("--config", help="INI configuration file")
    sub.add_argument("--input", action="append", default=None,
                     help="input image file or directory (repeatable)")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--overlays", action="store_true", default=None,
                     help="write annotated overlay PNGs")
    sub.add_argument("--budget-ms", type=float, default=None,
                     help="per-frame latency budget in milliseconds")
    sub.add_argument("--pixel-pitch", type=float, default=None,
                     help="physical pixel pitch in micrometers per pixel")
    sub.add_argument("--max-shift", type=int, default=None,
                     help="registration search half-width in pixels")
    sub.add_argument("--workers", type=int, default=None,
                     help="analysis worker threads (default: available parallelism)")
    sub.add_argument("--basis", help="stain basis file for dye unmixing")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dropcyte", description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("analyze-brightfield", "segment droplets and measure dye content"),
        ("analyze-fluorescence", "segment cells, morphometrics, live/dead calls"),
        ("register", "estimate per-frame drift and exposure gains"),
        ("calibrate", "build a stain basis from single-dye ROIs"),
        ("synth", "render a synthetic scene file with ground truth"),
        ("stream", "watch a folder and analyze frames as they arrive"),
    ):
        sub = commands.add_parser(name, help=help_text)
        _add_common(sub)
        if name == "calibrate":
            sub.add_argument("--background", default=None,
                             help="background ROI: 'path x0 y0 x1 y1'")
            sub.add_argument("--dye", action="append", default=None,
                             help="single-dye ROI: 'name path x0 y0 x1 y1' (repeatable)")
        if name == "synth":
            sub.add_argument("--view", choices=("auto", "brightfield", "fluorescence"),
                             default=None, help="which modality to render")
        if name == "stream":
            sub.add_argument("--analysis", choices=("brightfield", "fluorescence", "register"),
                             default=None, help="per-frame analysis to run")
            sub.add_argument("--max-frames", type=int, default=None,
                             help="stop after this many frames (for scripted runs)")
            sub.add_argument("--idle-timeout", type=float, default=None,
                             help="stop after this many seconds without new files")
    return parser


def _configure(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    updates: dict = {}
    if args.command in _ANALYZE_MODES:
        updates["mode"] = _ANALYZE_MODES[args.command]
    elif args.command == "stream":
        if args.analysis:
            updates["mode"] = args.analysis
        elif config.mode in ("calibrate", "synth"):
            updates["mode"] = "brightfield"
    if args.input:
        updates["input"] = tuple(args.input)
    if args.out:
        updates["output_dir"] = args.out
    if args.overlays:
        updates["emit_overlays"] = True
    if args.budget_ms is not None:
        updates["latency_budget_ms"] = args.budget_ms
    if args.pixel_pitch is not None:
        updates["pixel_pitch"] = args.pixel_pitch
    if args.max_shift is not None:
        updates["max_shift"] = args.max_shift
    if args.workers is not None:
        updates["workers"] = args.workers
    if args.basis:
        updates["basis_path"] = args.basis
    if args.command == "synth" and args.view:
        updates["view"] = args.view
    if args.command == "calibrate" and (args.background or args.dye):
        background = config.calibration.background if config.calibration else None
        dyes = list(config.calibration.dyes) if config.calibration else []
        if args.background:
            background = _parse_roi(args.background, "--background")
        for spec in args.dye or ():
            name, _, rest = spec.partition(" ")
            if not rest:
                raise ConfigError(f"--dye expects 'name path x0 y0 x1 y1', got {spec!r}")
            path, box = _parse_roi(rest, f"--dye {name}")
            dyes = [d for d in dyes if d[0] != name] + [(name, path, box)]
        updates["calibration"] = CalibrationJob(background=background, dyes=tuple(dyes))
    return replace(config, **updates)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        config = _configure(args)
        if args.command == "stream":
            return run_stream(
                config,
                max_frames=args.max_frames,
                idle_timeout_s=args.idle_timeout,
            )
        if args.command == "calibrate":
            return run_calibrate(config)
        if args.command == "synth":
            return run_synth(config)
        return run_batch(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
