"""Batch and watch-folder orchestration behind the command-line interface.

A run is described by a PipelineConfig (parsed from an INI file, overridden
by CLI flags), executed over PNG/TIFF frames, and emitted as results.csv,
summary.json, timing.csv, optional overlays/frame_<index>.png, and (in
stream mode) events.ndjson. Every frame is timed per stage against a
latency budget; frames over budget are flagged, never dropped.

Determinism contract: results.csv and summary.json depend only on the
inputs and configuration. Anything wall-clock flavored (stage timings,
timestamps) lives in timing.csv and run_meta.json so repeated runs stay
byte-identical where it matters.
"""

from __future__ import annotations

import configparser
import csv
import json
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from dropcyte.brightfield import (
    BackgroundModel,
    DropletRecord,
    SegmentationConfig,
    droplet_metrics,
    population_stats,
    segment_droplets,
    subtract_background,
)
from dropcyte.core import RasterImage, Region, _trace_pixels
from dropcyte.fluor import (
    GREEN_BAND,
    RED_BAND,
    CellRecord,
    HsvBand,
    link_tracks,
    measure_cells,
    segment_fluorescent,
)
from dropcyte.registration import (
    DEFAULT_MAX_SHIFT,
    FeaturelessFrameError,
    Shift,
    apply_translation,
    estimate_translation,
    normalize_exposure,
)
from dropcyte.stainsep import CalibrationError, StainBasis, calibrate
from dropcyte import synth

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")
MODES = ("brightfield", "fluorescence", "register", "calibrate", "synth")
STREAM_FAIL_LIMIT = 3
STREAM_POLL_S = 0.1


class ConfigError(ValueError):
    """Configuration file or flag set cannot describe a runnable pipeline."""


@dataclass(frozen=True)
class CalibrationJob:
    """ROI annotations for run_calibrate: one box per single-dye image."""

    background: tuple[str, tuple[int, int, int, int]] | None
    dyes: tuple[tuple[str, str, tuple[int, int, int, int]], ...]  # (dye, path, box)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs; file sections mirror the field groups."""

    mode: str = "brightfield"
    input: tuple[str, ...] = ()
    output_dir: str = "out"
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    green_band: HsvBand = GREEN_BAND
    red_band: HsvBand = RED_BAND
    min_cell_area: int = 30
    match_radius: float = 15.0
    basis_path: str | None = None
    pixel_pitch: float | None = None
    max_shift: int = DEFAULT_MAX_SHIFT
    latency_budget_ms: float = 2000.0
    emit_overlays: bool = False
    register_frames: bool | None = None  # None: on for fluorescence, off for brightfield
    workers: int | None = None
    view: str = "auto"  # synth render view: auto | brightfield | fluorescence
    calibration: CalibrationJob | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (self.latency_budget_ms > 0):
            raise ConfigError("latency_budget_ms must be positive")
        if self.max_shift < 1:
            raise ConfigError("max_shift must be >= 1")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.pixel_pitch is not None and not (self.pixel_pitch > 0):
            raise ConfigError("pixel_pitch must be positive")
        if self.min_cell_area < 1:
            raise ConfigError("min_cell_area must be >= 1")
        if self.view not in ("auto", "brightfield", "fluorescence"):
            raise ConfigError(f"view must be auto/brightfield/fluorescence, got {self.view!r}")


@dataclass(frozen=True)
class TimingReport:
    """Per-frame stage milliseconds; total is the exact stage sum."""

    frame_index: int
    read_ms: float
    register_ms: float
    segment_ms: float
    deconvolve_or_morph_ms: float
    write_ms: float
    total_ms: float
    budget_exceeded: bool

    @classmethod
    def make(cls, frame_index, read_ms, register_ms, segment_ms, morph_ms, write_ms, budget_ms):
        total = read_ms + register_ms + segment_ms + morph_ms + write_ms
        return cls(
            frame_index=frame_index,
            read_ms=read_ms,
            register_ms=register_ms,
            segment_ms=segment_ms,
            deconvolve_or_morph_ms=morph_ms,
            write_ms=write_ms,
            total_ms=total,
            budget_exceeded=total > budget_ms,
        )


# ---------------------------------------------------------------------------
# configuration file

_RUN_KEYS = {
    "mode", "input", "output", "basis", "pixel_pitch", "max_shift",
    "latency_budget_ms", "overlays", "workers", "register", "view",
}
_SEG_KEYS = {
    "gaussian_sigma", "threshold_mode", "fixed_threshold", "min_area",
    "min_circularity", "fill_holes",
}
_FLUOR_KEYS = {"green_band", "red_band", "min_cell_area", "match_radius"}
_SECTIONS = {"run", "segmentation", "fluorescence", "calibrate"}


def _check_keys(section: str, present, allowed: set[str]):
    unknown = set(present) - allowed
    if unknown:
        raise ConfigError(f"[{section}]: unknown key(s) {sorted(unknown)}")


def _parse_band(text: str, where: str) -> HsvBand:
    parts = text.split()
    if len(parts) not in (2, 3, 4):
        raise ConfigError(f"{where}: band is 'hue_lo hue_hi [min_sat [min_val]]', got {text!r}")
    try:
        values = [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return HsvBand(*values)


def _parse_roi(text: str, where: str) -> tuple[str, tuple[int, int, int, int]]:
    parts = text.split()
    if len(parts) != 5:
        raise ConfigError(f"{where}: expected 'path x0 y0 x1 y1', got {text!r}")
    try:
        box = tuple(int(v) for v in parts[1:])
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    if box[0] >= box[2] or box[1] >= box[3]:
        raise ConfigError(f"{where}: box {box} is empty")
    return parts[0], box


def parse_config(text: str, base_dir: str | Path = ".") -> PipelineConfig:
    """Parse INI configuration text; unknown sections or keys are errors.

    Relative paths are resolved against base_dir (the config file's
    directory) so runs do not depend on the process working directory.
    """
    base = Path(base_dir)
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    unknown = set(cp.sections()) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)}")

    kwargs: dict = {}
    try:
        if "run" in cp:
            run = cp["run"]
            _check_keys("run", run.keys(), _RUN_KEYS)
            if "mode" in run:
                kwargs["mode"] = run["mode"].strip()
            if "input" in run:
                kwargs["input"] = tuple(str(base / p) for p in run["input"].split())
            if "output" in run:
                kwargs["output_dir"] = str(base / run["output"].strip())
            if "basis" in run:
                kwargs["basis_path"] = str(base / run["basis"].strip())
            if "pixel_pitch" in run:
                kwargs["pixel_pitch"] = run.getfloat("pixel_pitch")
            if "max_shift" in run:
                kwargs["max_shift"] = run.getint("max_shift")
            if "latency_budget_ms" in run:
                kwargs["latency_budget_ms"] = run.getfloat("latency_budget_ms")
            if "overlays" in run:
                kwargs["emit_overlays"] = run.getboolean("overlays")
            if "workers" in run:
                kwargs["workers"] = run.getint("workers")
            if "register" in run:
                kwargs["register_frames"] = run.getboolean("register")
            if "view" in run:
                kwargs["view"] = run["view"].strip()
        if "segmentation" in cp:
            seg = cp["segmentation"]
            _check_keys("segmentation", seg.keys(), _SEG_KEYS)
            kwargs["segmentation"] = SegmentationConfig(
                gaussian_sigma=seg.getfloat("gaussian_sigma", 2.0),
                threshold_mode=seg.get("threshold_mode", "otsu").strip(),
                fixed_threshold=seg.getint("fixed_threshold", 0),
                min_area=seg.getint("min_area", 50),
                min_circularity=seg.getfloat("min_circularity", 0.6),
                fill_holes=seg.getboolean("fill_holes", True),
            )
        if "fluorescence" in cp:
            flu = cp["fluorescence"]
            _check_keys("fluorescence", flu.keys(), _FLUOR_KEYS)
            if "green_band" in flu:
                kwargs["green_band"] = _parse_band(flu["green_band"], "[fluorescence] green_band")
            if "red_band" in flu:
                kwargs["red_band"] = _parse_band(flu["red_band"], "[fluorescence] red_band")
            if "min_cell_area" in flu:
                kwargs["min_cell_area"] = flu.getint("min_cell_area")
            if "match_radius" in flu:
                kwargs["match_radius"] = flu.getfloat("match_radius")
        if "calibrate" in cp:
            cal = cp["calibrate"]
            background = None
            dyes = []
            for key in cal.keys():
                if key == "background":
                    path, box = _parse_roi(cal[key], "[calibrate] background")
                    background = (str(base / path), box)
                elif key.startswith("dye "):
                    name = key[4:].strip()
                    if not name:
                        raise ConfigError("[calibrate]: dye keys are 'dye <name>'")
                    path, box = _parse_roi(cal[key], f"[calibrate] {key}")
                    dyes.append((name, str(base / path), box))
                else:
                    raise ConfigError(f"[calibrate]: unknown key {key!r}")
            kwargs["calibration"] = CalibrationJob(background=background, dyes=tuple(dyes))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    return PipelineConfig(**kwargs)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), base_dir=path.parent)


# ---------------------------------------------------------------------------
# frame I/O and ordering

def natural_key(name: str):
    """Sort key treating digit runs numerically, so frame_2 < frame_10."""
    return tuple(
        (0, int(tok)) if tok.isdigit() else (1, tok)
        for tok in re.split(r"(\d+)", name)
        if tok
    )


def read_image(path: str | Path, pixel_pitch: float | None = None) -> RasterImage:
    """Load an 8-bit PNG/TIFF as grayscale or RGB; anything else converts to RGB."""
    with Image.open(path) as img:
        if img.mode == "L":
            pixels = np.asarray(img, dtype=np.uint8)
        elif img.mode == "RGB":
            pixels = np.asarray(img, dtype=np.uint8)
        else:
            pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return RasterImage(pixels, pixel_pitch=pixel_pitch)


def write_image(path: str | Path, image: RasterImage):
    Image.fromarray(image.pixels).save(path)


def _collect_inputs(config: PipelineConfig) -> list[Path]:
    files: list[Path] = []
    for entry in config.input:
        p = Path(entry)
        if p.is_dir():
            names = [
                child for child in p.iterdir()
                if child.suffix.lower() in IMAGE_SUFFIXES and child.is_file()
            ]
            files.extend(sorted(names, key=lambda c: natural_key(c.name)))
        elif p.is_file():
            files.append(p)
        else:
            raise ConfigError(f"input path not found: {p}")
    return files


def _validate_paths(config: PipelineConfig):
    """Referenced paths must exist before any processing starts."""
    if config.mode in ("brightfield", "fluorescence", "register", "synth") and not config.input:
        raise ConfigError("no input configured")
    for entry in config.input:
        if not Path(entry).exists():
            raise ConfigError(f"input path not found: {entry}")
    if config.basis_path is not None and not Path(config.basis_path).is_file():
        raise ConfigError(f"stain basis not found: {config.basis_path}")
    if config.mode == "calibrate":
        job = config.calibration
        if job is None or not job.dyes:
            raise ConfigError("calibrate needs a [calibrate] section with at least one dye ROI")
        if job.background is None:
            raise ConfigError("calibrate needs a background ROI")
        for _, path, _ in job.dyes:
            if not Path(path).is_file():
                raise ConfigError(f"calibration image not found: {path}")
        if not Path(job.background[0]).is_file():
            raise ConfigError(f"calibration image not found: {job.background[0]}")


def _load_basis(config: PipelineConfig) -> StainBasis | None:
    if config.basis_path is None:
        return None
    try:
        return StainBasis.from_text(Path(config.basis_path).read_text())
    except CalibrationError as exc:
        raise ConfigError(f"{config.basis_path}: {exc}") from exc


# ---------------------------------------------------------------------------
# per-frame analysis shared by batch and stream

def _identity_gains(image: RasterImage) -> tuple[float, ...]:
    return (1.0, 1.0, 1.0) if image.channels == 3 else (1.0,)


def _flat_background(image: RasterImage) -> BackgroundModel:
    """Uniform background plate at the frame's per-channel median.

    The pipeline gets no droplet-free reference frames, and droplets cover
    a minority of the field, so the median is the background estimate.
    """
    pixels = image.pixels
    if pixels.ndim == 3:
        level = np.rint(np.median(pixels.reshape(-1, 3), axis=0)).astype(np.uint8)
    else:
        level = np.uint8(np.rint(np.median(pixels)))
    plate = np.broadcast_to(level, pixels.shape).copy()
    return BackgroundModel(
        mean_image=RasterImage(plate, pixel_pitch=image.pixel_pitch), frame_count=1
    )


def _registration_active(config: PipelineConfig) -> bool:
    if config.mode == "register":
        return True
    if config.register_frames is not None:
        return config.register_frames
    return config.mode == "fluorescence"


@dataclass
class _FrameResult:
    index: int
    name: str
    image: RasterImage
    regions: list[Region]
    droplets: list[DropletRecord]
    cells: list[CellRecord]
    shift: Shift
    gains: tuple[float, ...]
    register_ms: float
    segment_ms: float
    morph_ms: float
    warning: str | None = None


def _analyze_frame(
    config: PipelineConfig,
    basis: StainBasis | None,
    reference: RasterImage | None,
    index: int,
    name: str,
    image: RasterImage,
) -> _FrameResult:
    """Register/segment/measure one frame; stage times in milliseconds."""
    shift = Shift(0.0, 0.0, 1.0)
    gains = _identity_gains(image)
    working = image
    register_ms = segment_ms = morph_ms = 0.0
    warning = None

    if _registration_active(config) and reference is not None and index > 0:
        t0 = time.perf_counter()
        normalized = normalize_exposure(image, reference)
        gains = normalized.gains
        try:
            shift = estimate_translation(reference, normalized.image, max_shift=config.max_shift)
            working = normalized.image
            if (shift.dx, shift.dy) != (0.0, 0.0):
                working = apply_translation(normalized.image, shift)
        except FeaturelessFrameError as exc:
            shift = Shift(0.0, 0.0, 0.0)
            working = normalized.image
            warning = f"frame {index} ({name}): {exc}; passed through unaligned"
        register_ms = (time.perf_counter() - t0) * 1000.0

    regions: list[Region] = []
    droplets: list[DropletRecord] = []
    cells: list[CellRecord] = []
    if config.mode == "brightfield":
        t0 = time.perf_counter()
        diff = subtract_background(working, _flat_background(working))
        regions = segment_droplets(diff, config.segmentation)
        segment_ms = (time.perf_counter() - t0) * 1000.0
        t0 = time.perf_counter()
        droplets = droplet_metrics(
            regions,
            pixel_pitch=config.pixel_pitch,
            image=working if basis is not None else None,
            basis=basis,
        )
        morph_ms = (time.perf_counter() - t0) * 1000.0
    elif config.mode == "fluorescence":
        t0 = time.perf_counter()
        regions = segment_fluorescent(
            working, (config.green_band, config.red_band), min_area=config.min_cell_area
        )
        segment_ms = (time.perf_counter() - t0) * 1000.0
        t0 = time.perf_counter()
        cells = measure_cells(
            working,
            config.green_band,
            config.red_band,
            min_area=config.min_cell_area,
            pixel_pitch=config.pixel_pitch,
            frame_index=index,
            regions=regions,
        )
        morph_ms = (time.perf_counter() - t0) * 1000.0

    return _FrameResult(
        index=index,
        name=name,
        image=working,
        regions=regions,
        droplets=droplets,
        cells=cells,
        shift=shift,
        gains=gains,
        register_ms=register_ms,
        segment_ms=segment_ms,
        morph_ms=morph_ms,
        warning=warning,
    )


# ---------------------------------------------------------------------------
# CSV schemas

def _csv_header(config: PipelineConfig, dye_names: tuple[str, ...]) -> list[str]:
    if config.mode == "brightfield":
        return [
            "frame_index", "droplet_id", "cx", "cy", "area_px2", "diameter_px",
            "diameter_um", "circularity",
            *[f"fraction_{name}" for name in dye_names],
            "empty_flag",
        ]
    if config.mode == "fluorescence":
        return [
            "frame_index", "cell_id", "track_id", "area", "perimeter",
            "circularity", "mean_green", "mean_red", "viability_class",
        ]
    return ["frame_index", "dx", "dy", "confidence", "gain_r", "gain_g", "gain_b"]


def _csv_rows(config: PipelineConfig, result: _FrameResult, dye_names: tuple[str, ...]) -> list[list[str]]:
    if config.mode == "brightfield":
        rows = []
        for r in result.droplets:
            rows.append([
                str(result.index),
                str(r.droplet_id),
                f"{r.centroid[0]:.2f}",
                f"{r.centroid[1]:.2f}",
                str(r.area_px2),
                f"{r.diameter_px:.2f}",
                "" if r.diameter_um is None else f"{r.diameter_um:.2f}",
                f"{r.circularity:.4f}",
                *[
                    f"{r.dye_fractions[name]:.2f}" if name in r.dye_fractions else ""
                    for name in dye_names
                ],
                "1" if r.empty else "0",
            ])
        return rows
    if config.mode == "fluorescence":
        rows = []
        for c in result.cells:
            rows.append([
                str(result.index),
                str(c.cell_id),
                "" if c.track_id is None else str(c.track_id),
                str(c.area_px2),
                f"{c.perimeter_px:.2f}",
                f"{c.circularity:.4f}",
                f"{c.mean_green:.2f}",
                f"{c.mean_red:.2f}",
                c.viability_class,
            ])
        return rows
    g = result.gains if len(result.gains) == 3 else (result.gains[0],) * 3
    return [[
        str(result.index),
        f"{result.shift.dx:.3f}",
        f"{result.shift.dy:.3f}",
        f"{result.shift.confidence:.4f}",
        f"{g[0]:.4f}",
        f"{g[1]:.4f}",
        f"{g[2]:.4f}",
    ]]


# ---------------------------------------------------------------------------
# overlays

def emit_overlay(
    frame: RasterImage,
    records: Sequence[DropletRecord | CellRecord],
    shift: Shift | None = None,
    regions: Sequence[Region] | None = None,
    header: str = "",
) -> RasterImage:
    """Annotated copy of the frame: stroked contours, id/metric labels, header.

    Original pixels are preserved outside the strokes and text. With no
    records the output is the frame plus the header line only.
    """
    pixels = frame.pixels
    if pixels.ndim == 2:
        pixels = np.stack([pixels] * 3, axis=-1)
    pil = Image.fromarray(pixels.copy())
    draw = ImageDraw.Draw(pil)
    bright = float(frame.gray().mean()) >= 128.0
    text_color = (20, 20, 20) if bright else (235, 235, 235)

    line = header or f"{len(records)} records"
    if shift is not None:
        line += f"  shift=({shift.dx:.2f}, {shift.dy:.2f}) conf={shift.confidence:.2f}"
    draw.text((4, 2), line, fill=text_color)

    region_by_label = {r.label: r for r in regions} if regions else {}
    for record in records:
        if isinstance(record, DropletRecord):
            rid, color = record.droplet_id, (255, 90, 30)
            label = f"{rid}: d={record.diameter_px:.1f}"
            if record.dye_fractions:
                label += " " + "/".join(f"{v:.2f}" for v in record.dye_fractions.values())
            if record.empty:
                label += " empty"
        else:
            rid = record.cell_id
            color = {
                "live": (70, 255, 70),
                "dead": (255, 70, 70),
            }.get(record.viability_class, (255, 230, 60))
            label = f"{rid}: {record.area_px2} / {record.circularity:.2f} / {record.viability_class}"
        region = region_by_label.get(rid)
        if region is not None:
            points = _trace_pixels(region.rows, region.cols, region.connectivity)
            draw.line(
                [(x + 0.5, y + 0.5) for x, y in points] + [tuple(points[0] + 0.5)],
                fill=color,
                width=1,
            )
            tx = min(region.bounding_box[2] + 2, pil.width - 60)
            ty = max(region.bounding_box[1] - 2, 12)
        else:
            tx, ty = record.centroid[0] + 4, record.centroid[1]
        draw.text((tx, ty), label, fill=color)
    return RasterImage(np.asarray(pil, dtype=np.uint8), pixel_pitch=frame.pixel_pitch)


# ---------------------------------------------------------------------------
# emission shared by batch and stream

class _Emitter:
    """Ordered sink: CSV rows, overlays, track state, summary accumulators."""

    def __init__(self, config: PipelineConfig, out_dir: Path, csv_file, dye_names):
        self.config = config
        self.out = out_dir
        self.dye_names = dye_names
        self.writer = csv.writer(csv_file, lineterminator="\n")
        self.csv_file = csv_file
        self.writer.writerow(_csv_header(config, dye_names))
        self.previous_tracks: list = []
        self.next_track = 1
        self.row_count = 0
        self.frame_entries: list[dict] = []
        self.droplets: list[DropletRecord] = []
        self.cells: list[CellRecord] = []
        self.shifts: list[tuple[int, Shift]] = []
        if config.emit_overlays:
            (out_dir / "overlays").mkdir(exist_ok=True)

    def emit(self, result: _FrameResult) -> float:
        """Write one frame's artifacts; returns the write-stage milliseconds."""
        t0 = time.perf_counter()
        if self.config.mode == "fluorescence":
            result.cells, self.previous_tracks, self.next_track = link_tracks(
                self.previous_tracks,
                result.cells,
                self.config.match_radius,
                self.next_track,
            )
        rows = _csv_rows(self.config, result, self.dye_names)
        self.writer.writerows(rows)
        self.csv_file.flush()
        self.row_count += len(rows)
        self.droplets.extend(result.droplets)
        self.cells.extend(result.cells)
        self.shifts.append((result.index, result.shift))
        records = result.droplets or result.cells
        self.frame_entries.append({
            "frame_index": result.index,
            "file": result.name,
            "records": len(records) if self.config.mode != "register" else 1,
        })
        if self.config.emit_overlays:
            overlay = emit_overlay(
                result.image,
                records,
                shift=result.shift if _registration_active(self.config) else None,
                regions=result.regions,
                header=f"frame {result.index}: {len(records)} records",
            )
            write_image(self.out / "overlays" / f"frame_{result.index:04d}.png", overlay)
        return (time.perf_counter() - t0) * 1000.0

    def summary(self, warnings: list[str]) -> dict:
        body: dict = {
            "mode": self.config.mode,
            "frames_processed": len(self.frame_entries),
            "record_count": self.row_count,
            "warning_count": len(warnings),
            "warnings": warnings,
            "frames": self.frame_entries,
        }
        if self.config.mode == "brightfield":
            body["dyes"] = list(self.dye_names)
            body["empty_droplets"] = sum(1 for d in self.droplets if d.empty)
            if self.droplets:
                stats = population_stats(self.droplets)
                body["population"] = {
                    "count": stats["count"],
                    "mean_diameter": round(stats["mean_diameter"], 4),
                    "sd_diameter": round(stats["sd_diameter"], 4),
                    "cv_percent": round(stats["cv_percent"], 4),
                }
            else:
                body["population"] = None
        elif self.config.mode == "fluorescence":
            counts = {"live": 0, "dead": 0, "ambiguous": 0}
            for c in self.cells:
                counts[c.viability_class] += 1
            body["viability_counts"] = counts
            body["track_count"] = self.next_track - 1
            called = counts["live"] + counts["dead"]
            body["live_fraction"] = round(counts["live"] / called, 6) if called else None
        elif self.config.mode == "register":
            body["max_abs_dx"] = round(max((abs(s.dx) for _, s in self.shifts), default=0.0), 4)
            body["max_abs_dy"] = round(max((abs(s.dy) for _, s in self.shifts), default=0.0), 4)
            body["mean_confidence"] = round(
                sum(s.confidence for _, s in self.shifts) / len(self.shifts), 4
            ) if self.shifts else None
        return body


def _write_timing(out: Path, reports: list[TimingReport]):
    with open(out / "timing.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([
            "frame_index", "read_ms", "register_ms", "segment_ms",
            "deconvolve_or_morph_ms", "write_ms", "total_ms", "budget_exceeded",
        ])
        for r in reports:
            writer.writerow([
                str(r.frame_index), f"{r.read_ms:.3f}", f"{r.register_ms:.3f}",
                f"{r.segment_ms:.3f}", f"{r.deconvolve_or_morph_ms:.3f}",
                f"{r.write_ms:.3f}", f"{r.total_ms:.3f}",
                "1" if r.budget_exceeded else "0",
            ])


def _write_summary(out: Path, body: dict):
    (out / "summary.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _write_meta(out: Path, started: str, reports: list[TimingReport], budget_ms: float):
    totals = [r.total_ms for r in reports]
    meta = {
        "started_utc": started,
        "finished_utc": datetime.now(timezone.utc).isoformat(),
        "budget_ms": budget_ms,
        "frames": len(reports),
        "mean_total_ms": round(sum(totals) / len(totals), 3) if totals else None,
        "max_total_ms": round(max(totals), 3) if totals else None,
        "budget_exceeded_frames": sum(1 for r in reports if r.budget_exceeded),
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# run modes

def run_batch(config: PipelineConfig, log: Callable[[str], None] = print) -> int:
    """Process every input frame; 0 ok, 2 nothing processable, 3 with warnings."""
    if config.mode in ("calibrate", "synth"):
        raise ConfigError(f"run_batch does not handle mode {config.mode!r}")
    started = datetime.now(timezone.utc).isoformat()
    _validate_paths(config)
    files = _collect_inputs(config)
    if not files:
        log("no input frames")
        return 2
    basis = _load_basis(config)
    dye_names = basis.names if basis is not None else ()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    warnings: list[str] = []
    loaded: list[tuple[str, RasterImage, float]] = []
    for path in files:
        t0 = time.perf_counter()
        try:
            image = read_image(path, pixel_pitch=config.pixel_pitch)
        except Exception as exc:  # corrupt frame: isolate, keep going
            warnings.append(f"{path.name}: unreadable ({exc})")
            log(f"skipping {path.name}: {exc}")
            continue
        loaded.append((path.name, image, (time.perf_counter() - t0) * 1000.0))
    if not loaded:
        log("no readable frames")
        return 2

    reference = loaded[0][1]
    jobs = [
        (index, name, image)
        for index, (name, image, _) in enumerate(loaded)
    ]

    def work(job):
        index, name, image = job
        return _analyze_frame(config, basis, reference, index, name, image)

    workers = config.workers if config.workers is not None else (os.cpu_count() or 1)
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]

    reports: list[TimingReport] = []
    with open(out / "results.csv", "w", newline="") as csv_file:
        emitter = _Emitter(config, out, csv_file, dye_names)
        for (name, image, read_ms), result in zip(loaded, results):
            if result.warning:
                warnings.append(result.warning)
            write_ms = emitter.emit(result)
            reports.append(TimingReport.make(
                result.index, read_ms, result.register_ms, result.segment_ms,
                result.morph_ms, write_ms, config.latency_budget_ms,
            ))
        _write_summary(out, emitter.summary(warnings))
    _write_timing(out, reports)
    _write_meta(out, started, reports, config.latency_budget_ms)
    return 3 if warnings else 0


def run_stream(
    config: PipelineConfig,
    max_frames: int | None = None,
    idle_timeout_s: float | None = None,
    poll_interval_s: float = STREAM_POLL_S,
    log: Callable[[str], None] = print,
) -> int:
    """Watch a folder and process frames as they stabilize, until interrupted.

    A file is processed once its size is unchanged across two polls
    (poll_interval_s apart), in natural filename order within each poll.
    Read or analysis failures are retried on later polls; the third failure
    skips the file with a logged event. Frames over the latency budget are
    flagged in timing and events, never dropped. max_frames/idle_timeout_s
    bound the run for scripted use; interactive runs stop on Ctrl-C.
    """
    if config.mode in ("calibrate", "synth"):
        raise ConfigError(f"run_stream does not handle mode {config.mode!r}")
    if len(config.input) != 1 or not Path(config.input[0]).is_dir():
        raise ConfigError("stream mode watches exactly one input directory")
    started = datetime.now(timezone.utc).isoformat()
    watch = Path(config.input[0])
    basis = _load_basis(config)
    dye_names = basis.names if basis is not None else ()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    warnings: list[str] = []
    reports: list[TimingReport] = []
    sizes: dict[str, int] = {}
    failures: dict[str, int] = {}
    done: set[str] = set()
    skipped: set[str] = set()
    reference: RasterImage | None = None
    frame_index = 0
    last_activity = time.monotonic()

    csv_file = open(out / "results.csv", "w", newline="")
    events = open(out / "events.ndjson", "w")
    emitter = _Emitter(config, out, csv_file, dye_names)

    def event(payload: dict):
        events.write(json.dumps(payload, sort_keys=True) + "\n")
        events.flush()

    try:
        while True:
            if max_frames is not None and frame_index >= max_frames:
                break
            candidates = sorted(
                (
                    child.name
                    for child in watch.iterdir()
                    if child.is_file()
                    and child.suffix.lower() in IMAGE_SUFFIXES
                    and child.name not in done
                    and child.name not in skipped
                ),
                key=natural_key,
            )
            stable = []
            for name in candidates:
                try:
                    size = (watch / name).stat().st_size
                except OSError:
                    continue
                if sizes.get(name) == size:
                    stable.append(name)
                sizes[name] = size
            for name in stable:
                if max_frames is not None and frame_index >= max_frames:
                    break
                path = watch / name
                t0 = time.perf_counter()
                try:
                    image = read_image(path, pixel_pitch=config.pixel_pitch)
                    read_ms = (time.perf_counter() - t0) * 1000.0
                    if reference is None:
                        reference = image
                    result = _analyze_frame(config, basis, reference, frame_index, name, image)
                except Exception as exc:
                    failures[name] = failures.get(name, 0) + 1
                    if failures[name] >= STREAM_FAIL_LIMIT:
                        skipped.add(name)
                        warnings.append(
                            f"{name}: unreadable after {STREAM_FAIL_LIMIT} attempts ({exc})"
                        )
                        event({"event": "skip", "file": name, "reason": str(exc)})
                        log(f"skipping {name}: {exc}")
                    continue
                if result.warning:
                    warnings.append(result.warning)
                write_ms = emitter.emit(result)
                report = TimingReport.make(
                    frame_index, read_ms, result.register_ms, result.segment_ms,
                    result.morph_ms, write_ms, config.latency_budget_ms,
                )
                reports.append(report)
                event({
                    "event": "frame",
                    "frame_index": frame_index,
                    "file": name,
                    "records": emitter.frame_entries[-1]["records"],
                    "total_ms": round(report.total_ms, 3),
                    "budget_exceeded": report.budget_exceeded,
                })
                done.add(name)
                frame_index += 1
                last_activity = time.monotonic()
            if max_frames is not None and frame_index >= max_frames:
                break
            if idle_timeout_s is not None and time.monotonic() - last_activity > idle_timeout_s:
                break
            time.sleep(poll_interval_s)
    except KeyboardInterrupt:
        log("interrupted; flushing outputs")
    finally:
        _write_summary(out, emitter.summary(warnings))
        csv_file.close()
        events.close()
    _write_timing(out, reports)
    _write_meta(out, started, reports, config.latency_budget_ms)
    if frame_index == 0:
        return 2
    return 3 if warnings else 0


def run_calibrate(config: PipelineConfig, log: Callable[[str], None] = print) -> int:
    """Build a stain basis from configured single-dye ROIs; writes calibration.stain."""
    _validate_paths(config)
    job = config.calibration
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    def crop(path: str, box) -> np.ndarray:
        image = read_image(path)
        if image.channels != 3:
            raise CalibrationError(f"{path}: calibration images must be RGB")
        x0, y0, x1, y1 = box
        h, w = image.pixels.shape[:2]
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise CalibrationError(f"{path}: ROI {box} outside {w}x{h} image")
        return image.pixels[y0:y1, x0:x1].reshape(-1, 3)

    try:
        background = crop(*job.background)
        samples = {name: crop(path, box) for name, path, box in job.dyes}
        basis = calibrate(samples, background)
    except CalibrationError as exc:
        log(f"calibration failed: {exc}")
        return 1
    (out / "calibration.stain").write_text(basis.to_text())
    singulars = np.linalg.svd(basis.matrix, compute_uv=False)
    condition = float(singulars[0] / singulars[-1]) if singulars[-1] > 0 else math.inf
    log(f"calibrated {len(basis.names)} dye(s): {', '.join(basis.names)}")
    log(f"white point: {tuple(round(v, 2) for v in basis.white_point)}")
    log(f"condition number: {condition:.3f}")
    for i in range(len(basis.names)):
        for j in range(i + 1, len(basis.names)):
            cos = float(np.clip(np.dot(basis.matrix[i], basis.matrix[j]), -1.0, 1.0))
            log(f"angle {basis.names[i]}/{basis.names[j]}: {math.degrees(math.acos(cos)):.2f} deg")
    return 0


def run_synth(config: PipelineConfig, log: Callable[[str], None] = print) -> int:
    """Render a scene file to frames plus a ground-truth JSON."""
    _validate_paths(config)
    if len(config.input) != 1:
        raise ConfigError("synth mode takes exactly one scene file")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        spec = synth.scene_from_text(Path(config.input[0]).read_text())
        view = config.view
        if view == "auto":
            view = "brightfield" if spec.droplets or not spec.cells else "fluorescence"
        frames, truth = synth.render_sequence(spec, mode=view)
    except synth.SceneError as exc:
        log(f"scene error: {exc}")
        return 1
    for index, frame in enumerate(frames):
        write_image(out / f"frame_{index:04d}.png", frame)
    payload = {
        "view": view,
        "seed": truth.seed,
        "noise_sigma": truth.noise_sigma,
        "pixel_pitch": truth.pixel_pitch,
        "shifts": [list(s) for s in truth.shifts],
        "gains": list(truth.gains),
        "objects": [
            {
                "kind": o.kind,
                "index": o.index,
                "center": list(o.center),
                "area": o.area,
                "perimeter": o.perimeter,
                "circularity": o.circularity,
                "diameter": o.diameter,
                "dye_fractions": o.dye_fractions,
                "empty": o.empty,
                "color_class": o.color_class,
            }
            for o in truth.objects
        ],
    }
    (out / "truth.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    log(f"rendered {len(frames)} {view} frame(s) to {out}")
    return 0
