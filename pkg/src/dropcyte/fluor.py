"""Fluorescence cell analysis: HSV segmentation, morphometry, live/dead calls.

Cells are segmented by hue bands in HSV space (wraparound supported, so a
red band of [330, 30) works), measured with the shared region machinery,
and classified by the ratio of their mean green and red intensities: a
green-dominant cell (G >= 2R) reads as live, red-dominant (R >= 2G) as
dead, anything in between as ambiguous. Regions too dim to trust
(G + R < 5 gray levels) are ambiguous and flagged dim.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from dropcyte.core import (
    BinaryMask,
    RasterImage,
    Region,
    circularity,
    label_components,
    _polyline_length,
    _trace_pixels,
)

DIM_FLOOR = 5.0  # mean G + mean R below this many gray levels is untrustworthy
DOMINANCE = 2.0  # channel ratio required for a live/dead call


@dataclass(frozen=True)
class HsvBand:
    """Hue interval [hue_lo, hue_hi) in degrees with S/V floors.

    hue_lo > hue_hi wraps through 0 (e.g. 330..30 covers reds). Saturation
    and value floors reject gray background and near-black noise.
    """

    hue_lo: float
    hue_hi: float
    min_saturation: float = 0.2
    min_value: float = 0.1

    def __post_init__(self):
        if not (0 <= self.hue_lo < 360 and 0 <= self.hue_hi < 360):
            raise ValueError(f"hue bounds must be in [0, 360), got {self.hue_lo}, {self.hue_hi}")
        if not (0 <= self.min_saturation <= 1 and 0 <= self.min_value <= 1):
            raise ValueError("saturation/value floors must be in [0, 1]")

    def contains(self, hue, saturation, value):
        """Vectorized membership; inputs are arrays or scalars."""
        hue = np.asarray(hue)
        if self.hue_lo <= self.hue_hi:
            in_hue = (hue >= self.hue_lo) & (hue < self.hue_hi)
        else:
            in_hue = (hue >= self.hue_lo) | (hue < self.hue_hi)
        return in_hue & (np.asarray(saturation) >= self.min_saturation) & (
            np.asarray(value) >= self.min_value
        )


GREEN_BAND = HsvBand(90.0, 150.0)
RED_BAND = HsvBand(330.0, 30.0)


@dataclass(frozen=True)
class CellRecord:
    """Morphometrics plus viability for one segmented cell.

    live_fraction_context is the live fraction of the population the cell
    was measured in (the whole field here; a per-droplet caller can narrow
    it), so each row carries its denominator.
    """

    cell_id: int
    frame_index: int
    centroid: tuple[float, float]
    area_px2: int
    area_um2: float | None
    perimeter_px: float
    circularity: float
    mean_green: float
    mean_red: float
    viability_class: str  # "live" | "dead" | "ambiguous"
    dim: bool
    live_fraction_context: float = 0.0
    track_id: int | None = None


@dataclass(frozen=True, eq=False)
class LiveDeadResult:
    """Per-region viability calls plus the field-level intensity ratio."""

    classes: tuple[str, ...]
    dim: tuple[bool, ...]
    mean_green: tuple[float, ...]
    mean_red: tuple[float, ...]
    field_ratio: float  # sum(G) / (sum(G) + sum(R)) over all region pixels


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Tracked cells: per-frame records plus per-track (frame, record) series."""

    frames: list[list[CellRecord]]
    tracks: dict[int, list[tuple[int, CellRecord]]]


def rgb_to_hsv(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized uint8 RGB -> (hue degrees [0, 360), saturation, value).

    Achromatic pixels get hue 0 and saturation 0; value is max(R,G,B)/255.
    """
    p = np.asarray(pixels, dtype=np.float64) / 255.0
    if p.shape[-1] != 3:
        raise ValueError("expected trailing RGB axis of size 3")
    r, g, b = p[..., 0], p[..., 1], p[..., 2]
    value = p.max(axis=-1)
    delta = value - p.min(axis=-1)
    saturation = np.divide(delta, value, out=np.zeros_like(value), where=value > 0)

    with np.errstate(invalid="ignore", divide="ignore"):
        hr = (60.0 * (g - b) / delta) % 360.0
        hg = 60.0 * (b - r) / delta + 120.0
        hb = 60.0 * (r - g) / delta + 240.0
    hue = np.select(
        [delta <= 0, value == r, value == g],
        [np.zeros_like(value), hr, hg],
        default=hb,
    )
    return hue, saturation, value


def segment_fluorescent(
    image: RasterImage,
    bands: HsvBand | Sequence[HsvBand],
    min_area: int = 30,
) -> list[Region]:
    """Label hue-band foreground; multiple bands are OR-ed into one mask.

    Regions carry per-channel mean intensities and are relabeled 1..K in
    raster order after the min_area gate.
    """
    if image.channels != 3:
        raise ValueError("fluorescence segmentation needs an RGB image")
    if isinstance(bands, HsvBand):
        bands = (bands,)
    hue, sat, val = rgb_to_hsv(image.pixels)
    bits = np.zeros(hue.shape, dtype=bool)
    for band in bands:
        bits |= band.contains(hue, sat, val)
    bits = ndimage.binary_fill_holes(bits)
    regions = label_components(BinaryMask(bits), connectivity=8, intensity=image)
    kept = [region for region in regions if region.pixel_count >= min_area]
    return [replace(region, label=k) for k, region in enumerate(kept, start=1)]


def morphometrics(region: Region, pixel_pitch: float | None = None) -> dict[str, float | None]:
    """Area, perimeter, circularity, and equivalent diameter for one region."""
    area = region.pixel_count
    diameter = 2.0 * math.sqrt(area / math.pi)
    return {
        "area_px2": float(area),
        "area_um2": area * pixel_pitch**2 if pixel_pitch else None,
        "perimeter_px": region.perimeter,
        "circularity": circularity(area, region.perimeter),
        "equivalent_diameter_px": diameter,
    }


def _classify(mean_green: float, mean_red: float) -> tuple[str, bool]:
    if mean_green + mean_red < DIM_FLOOR:
        return "ambiguous", True
    if mean_green >= DOMINANCE * mean_red:
        return "live", False
    if mean_red >= DOMINANCE * mean_green:
        return "dead", False
    return "ambiguous", False


def _band_channel(band: HsvBand, default: int) -> int:
    """RGB channel index whose pure hue falls inside the band.

    Lets nonstandard filter sets (e.g. a blue viability stain) reuse the
    classifier; ambiguous or empty bands fall back to the conventional
    channel.
    """
    hits = [ch for ch, hue in enumerate((0.0, 120.0, 240.0)) if band.contains(hue, 1.0, 1.0)]
    return hits[0] if len(hits) == 1 else default


def live_dead(
    image: RasterImage,
    green_band: HsvBand = GREEN_BAND,
    red_band: HsvBand = RED_BAND,
    regions: Sequence[Region] = (),
) -> LiveDeadResult:
    """Viability per region from mean green/red intensity, plus the field ratio.

    The bands name which channel plays "green" and which "red"; the
    dominance rule itself runs on raw channel means. The field ratio sums
    those channels over every region pixel; with no regions (or an
    all-black field) it reports 0.0.
    """
    if image.channels != 3:
        raise ValueError("viability classification needs an RGB image")
    green_ch = _band_channel(green_band, 1)
    red_ch = _band_channel(red_band, 0)
    classes, dims, greens, reds = [], [], [], []
    total_green = total_red = 0.0
    for region in regions:
        sample = image.pixels[region.rows, region.cols]
        mean_green = float(sample[:, green_ch].mean())
        mean_red = float(sample[:, red_ch].mean())
        label, dim = _classify(mean_green, mean_red)
        classes.append(label)
        dims.append(dim)
        greens.append(mean_green)
        reds.append(mean_red)
        total_green += float(sample[:, green_ch].sum())
        total_red += float(sample[:, red_ch].sum())
    denom = total_green + total_red
    ratio = total_green / denom if denom > 0 else 0.0
    return LiveDeadResult(
        classes=tuple(classes),
        dim=tuple(dims),
        mean_green=tuple(greens),
        mean_red=tuple(reds),
        field_ratio=ratio,
    )


def measure_cells(
    image: RasterImage,
    green_band: HsvBand = GREEN_BAND,
    red_band: HsvBand = RED_BAND,
    min_area: int = 30,
    pixel_pitch: float | None = None,
    frame_index: int = 0,
    segmentation_bands: Sequence[HsvBand] | None = None,
    regions: Sequence[Region] | None = None,
) -> list[CellRecord]:
    """Segment and emit full per-cell records.

    Segmentation runs on the union of green_band and red_band unless
    segmentation_bands overrides it (e.g. a single band for a one-stain
    morphology series) or regions are passed in precomputed. Every record
    carries the field-level live fraction as its context.
    """
    if regions is None:
        bands = segmentation_bands if segmentation_bands is not None else (green_band, red_band)
        regions = segment_fluorescent(image, bands, min_area=min_area)
    viability = live_dead(image, green_band, red_band, regions)
    records = []
    for k, region in enumerate(regions):
        shape = morphometrics(region, pixel_pitch)
        records.append(
            CellRecord(
                cell_id=region.label,
                frame_index=frame_index,
                centroid=region.centroid,
                area_px2=region.pixel_count,
                area_um2=shape["area_um2"],
                perimeter_px=region.perimeter,
                circularity=shape["circularity"],
                mean_green=viability.mean_green[k],
                mean_red=viability.mean_red[k],
                viability_class=viability.classes[k],
                dim=viability.dim[k],
                live_fraction_context=viability.field_ratio,
            )
        )
    return records


def transfer_channel(image: RasterImage, mapping: str | dict[str, str]) -> RasterImage:
    """Reorder or reassign RGB channels.

    mapping is a 3-letter string over 'rgb' (output R,G,B take those input
    channels; 'grb' swaps red and green) or an equivalent dict like
    {'r': 'g', 'g': 'r', 'b': 'b'}. Duplicates are allowed.
    """
    if image.channels != 3:
        raise ValueError("channel transfer needs an RGB image")
    if isinstance(mapping, dict):
        try:
            mapping = "".join(mapping[c] for c in "rgb")
        except KeyError as exc:
            raise ValueError(f"mapping must define r, g and b; missing {exc}") from exc
    mapping = mapping.lower()
    if len(mapping) != 3 or any(c not in "rgb" for c in mapping):
        raise ValueError(f"mapping must be 3 letters over 'rgb', got {mapping!r}")
    indices = ["rgb".index(c) for c in mapping]
    return RasterImage(
        np.ascontiguousarray(image.pixels[..., indices]), pixel_pitch=image.pixel_pitch
    )


def region_timeseries(
    frames: Sequence[RasterImage],
    bands: HsvBand | Sequence[HsvBand] | None = None,
    min_area: int = 30,
    match_radius: float = 15.0,
    pixel_pitch: float | None = None,
    green_band: HsvBand = GREEN_BAND,
    red_band: HsvBand = RED_BAND,
) -> TimeSeries:
    """Measure cells per aligned frame and link them into tracks.

    bands selects the segmentation band(s); by default it is the union of
    green_band and red_band. Matching is nearest-centroid against the
    previous frame only, greedy by distance, one-to-one, within
    match_radius pixels. Unmatched cells start new tracks; a cell that
    disappears simply ends its series, and nothing is matched across the
    gap.
    """
    if isinstance(bands, HsvBand):
        bands = (bands,)
    per_frame: list[list[CellRecord]] = []
    tracks: dict[int, list[tuple[int, CellRecord]]] = {}
    previous: list[tuple[tuple[float, float], int]] = []
    next_track = 1
    for frame_index, frame in enumerate(frames):
        records = measure_cells(
            frame,
            green_band,
            red_band,
            min_area,
            pixel_pitch,
            frame_index=frame_index,
            segmentation_bands=bands,
        )
        tagged, previous, next_track = link_tracks(previous, records, match_radius, next_track)
        for record in tagged:
            tracks.setdefault(record.track_id, []).append((frame_index, record))
        per_frame.append(tagged)
    return TimeSeries(frames=per_frame, tracks=tracks)


def link_tracks(
    previous: list[tuple[tuple[float, float], int]],
    records: Sequence[CellRecord],
    match_radius: float = 15.0,
    next_track: int = 1,
) -> tuple[list[CellRecord], list[tuple[tuple[float, float], int]], int]:
    """Assign track ids given the previous frame's (centroid, track_id) list.

    Greedy by distance, one-to-one; unmatched records open new tracks.
    Returns (tagged records, this frame's (centroid, track_id) list, next
    unused track id) so callers can fold it over a stream.
    """
    candidates = []
    for i, record in enumerate(records):
        for j, (prev_centroid, _) in enumerate(previous):
            distance = math.hypot(
                record.centroid[0] - prev_centroid[0],
                record.centroid[1] - prev_centroid[1],
            )
            if distance <= match_radius:
                candidates.append((distance, i, j))
    candidates.sort()
    matched_i: dict[int, int] = {}
    used_j: set[int] = set()
    for distance, i, j in candidates:
        if i not in matched_i and j not in used_j:
            matched_i[i] = previous[j][1]
            used_j.add(j)
    tagged = []
    for i, record in enumerate(records):
        track_id = matched_i.get(i)
        if track_id is None:
            track_id = next_track
            next_track += 1
        tagged.append(replace(record, track_id=track_id))
    return tagged, [(record.centroid, record.track_id) for record in tagged], next_track


def import_labels(
    label_map: RasterImage,
    source_image: RasterImage | None = None,
) -> list[Region]:
    """Adopt an external label image as Regions.

    Grayscale maps use the pixel value as the label; RGB maps encode it as
    R*256 + G (16-bit ids). Each distinct nonzero value becomes one Region
    even if its pixels are disconnected; the perimeter is then the sum over
    its 8-connected parts. Intensity statistics come from source_image when
    given. Output order is first-encounter raster order, and Region.label
    keeps the external id.
    """
    pixels = label_map.pixels
    if pixels.ndim == 3:
        values = pixels[..., 0].astype(np.int64) * 256 + pixels[..., 1].astype(np.int64)
    else:
        values = pixels.astype(np.int64)
    if source_image is not None and source_image.pixels.shape[:2] != values.shape:
        raise ValueError("source image shape does not match label map")
    flat = values.ravel()
    unique, first_index = np.unique(flat, return_index=True)
    order = np.argsort(first_index, kind="stable")
    regions: list[Region] = []
    for idx in order:
        value = int(unique[idx])
        if value == 0:
            continue
        rows, cols = np.nonzero(values == value)
        parts, n_parts = ndimage.label(
            _crop_mask(rows, cols), structure=np.ones((3, 3), dtype=bool)
        )
        perimeter = 0.0
        r0, c0 = int(rows.min()), int(cols.min())
        for part in range(1, n_parts + 1):
            pr, pc = np.nonzero(parts == part)
            pts = _trace_pixels(pr + r0, pc + c0, connectivity=8)
            perimeter += _polyline_length(pts)
        mean_int = None
        if source_image is not None:
            sample = source_image.pixels[rows, cols]
            if sample.ndim == 1:
                mean_int = (float(sample.mean()),)
            else:
                mean_int = tuple(float(v) for v in sample.mean(axis=0))
        regions.append(
            Region(
                label=value,
                pixel_count=len(rows),
                centroid=(float(cols.mean()), float(rows.mean())),
                bounding_box=(
                    int(cols.min()),
                    int(rows.min()),
                    int(cols.max()) + 1,
                    int(rows.max()) + 1,
                ),
                perimeter=perimeter,
                mean_intensity=mean_int,
                rows=rows,
                cols=cols,
                connectivity=8,
            )
        )
    return regions


def _crop_mask(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    r0, c0 = int(rows.min()), int(cols.min())
    out = np.zeros((int(rows.max()) - r0 + 1, int(cols.max()) - c0 + 1), dtype=bool)
    out[rows - r0, cols - c0] = True
    return out
