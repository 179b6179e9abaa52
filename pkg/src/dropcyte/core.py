"""Shared raster primitives: images, binary masks, labeled regions, contours.

Pixel (r, c) is modeled as the closed unit square [c-0.5, c+0.5] x [r-0.5, r+0.5],
so contour vertices live on the half-integer corner lattice. Perimeters come from
a mid-crack polygon: each axis-aligned run of the crack (pixel-edge) boundary
contributes its midpoint as a vertex, and the sharp corner between two runs is
kept only when it reflects real geometry (both runs at least 2 px, or one of
them is a cap closing off a thin limb) rather than a digitization stairstep.
This keeps rectangles exact and circles within a few percent of 2*pi*r.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass(frozen=True, eq=False)
class RasterImage:
    """8-bit raster, grayscale (H, W) or RGB (H, W, 3).

    pixel_pitch is the physical sampling pitch in micrometers per pixel, or
    None when the scale is unknown; metric outputs stay None in that case.
    """

    pixels: np.ndarray
    pixel_pitch: float | None = None

    def __post_init__(self):
        px = self.pixels
        if not isinstance(px, np.ndarray) or px.dtype != np.uint8:
            raise TypeError("pixels must be a uint8 ndarray")
        if px.ndim == 3 and px.shape[2] == 3:
            pass
        elif px.ndim != 2:
            raise ValueError(f"expected (H, W) or (H, W, 3) pixels, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must have at least one pixel")
        if self.pixel_pitch is not None:
            pitch = float(self.pixel_pitch)
            if not np.isfinite(pitch) or pitch <= 0:
                raise ValueError(f"pixel_pitch must be positive, got {self.pixel_pitch}")
            object.__setattr__(self, "pixel_pitch", pitch)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    def gray(self) -> np.ndarray:
        """Luminance as float64 (H, W); RGB is averaged with equal weights."""
        if self.pixels.ndim == 2:
            return self.pixels.astype(np.float64)
        return self.pixels.mean(axis=2, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Boolean (H, W) raster; True marks foreground."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        if bits.dtype != bool:
            bits = bits.astype(bool)
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


@dataclass(frozen=True, eq=False)
class Region:
    """One connected component of a mask.

    centroid is (cx, cy) in pixel coordinates, bounding_box is half-open
    (x0, y0, x1, y1), perimeter is the mid-crack polygon arc length of the
    outer contour, and mean_intensity holds per-channel means when an
    intensity image was supplied at labeling time. rows/cols list every
    member pixel in raster order.
    """

    label: int
    pixel_count: int
    centroid: tuple[float, float]
    bounding_box: tuple[int, int, int, int]
    perimeter: float
    mean_intensity: tuple[float, ...] | None
    rows: np.ndarray = field(repr=False)
    cols: np.ndarray = field(repr=False)
    connectivity: int = 8

    def mask(self, shape: tuple[int, int]) -> BinaryMask:
        """Render the region back onto a canvas of the given (H, W) shape."""
        bits = np.zeros(shape, dtype=bool)
        bits[self.rows, self.cols] = True
        return BinaryMask(bits)


# Corner-lattice steps (di, dj): E, S, W, N. Corner (i, j) sits at the point
# (x, y) = (j - 0.5, i - 0.5), the top-left corner of pixel (i, j).
_DIRS = ((0, 1), (1, 0), (0, -1), (-1, 0))


def _pix_right(i: int, j: int, d: int) -> tuple[int, int]:
    if d == 0:
        return (i, j)
    if d == 1:
        return (i, j - 1)
    if d == 2:
        return (i - 1, j - 1)
    return (i - 1, j)


def _pix_left(i: int, j: int, d: int) -> tuple[int, int]:
    if d == 0:
        return (i - 1, j)
    if d == 1:
        return (i, j)
    if d == 2:
        return (i, j - 1)
    return (i - 1, j - 1)


def _boundary_runs(padded: np.ndarray, connectivity: int) -> list[list]:
    """Walk the outer crack boundary keeping foreground on the right.

    padded must have a 1-px false border so pixel lookups never leave the
    array. Returns [direction, length, start_corner] runs in walk order.
    At a diagonal pinch two continuations are legal; trying the left turn
    first crosses the pinch (8-connectivity keeps the component whole) while
    trying the right turn first hugs it (4-connectivity splits there).
    """
    rows, cols = np.nonzero(padded)
    i, j = int(rows[0]), int(cols[0])  # topmost-leftmost pixel: top edge is boundary
    d = 0
    start_state = (i, j, d)
    turn_order = (-1, 0, 1) if connectivity == 8 else (1, 0, -1)
    edges: list[int] = []
    while True:
        di, dj = _DIRS[d]
        edges.append(d)
        i, j = i + di, j + dj
        for turn in turn_order:
            nd = (d + turn) % 4
            if padded[_pix_right(i, j, nd)] and not padded[_pix_left(i, j, nd)]:
                d = nd
                break
        else:
            d = (d + 2) % 4  # U-turn at a zero-width neck
        if (i, j, d) == start_state:
            break

    runs: list[list] = []
    ci, cj = start_state[0], start_state[1]
    k = 0
    while k < len(edges):
        d = edges[k]
        si, sj = ci, cj
        n = 0
        while k < len(edges) and edges[k] == d:
            n += 1
            k += 1
            ci += _DIRS[d][0]
            cj += _DIRS[d][1]
        runs.append([d, n, (si, sj)])
    # the walk may start mid-run; merge the cyclic wrap
    if len(runs) > 1 and runs[0][0] == runs[-1][0]:
        _, n, start = runs.pop()
        runs[0][1] += n
        runs[0][2] = start
    return runs


def _polygon_from_runs(runs: list[list]) -> np.ndarray:
    """Mid-crack polygon vertices (x, y) from boundary runs.

    Every run contributes its midpoint. The corner between run k-1 and run k
    is kept sharp when min(len) >= 2 on both sides, or when either run is a
    cap (entered and left by turns of the same hand), which closes off
    1-px-wide limbs; otherwise the corner is a digitization stairstep and
    the midpoint chain cuts across it.
    """
    n = len(runs)
    turns = []
    for k in range(n):
        prev_d = runs[k - 1][0]
        turns.append(+1 if (prev_d + 1) % 4 == runs[k][0] else -1)
    caps = [turns[k] == turns[(k + 1) % n] for k in range(n)]
    pts: list[tuple[float, float]] = []
    for k in range(n):
        d, length, (si, sj) = runs[k]
        if min(runs[k - 1][1], length) >= 2 or caps[k - 1] or caps[k]:
            pts.append((sj - 0.5, si - 0.5))
        di, dj = _DIRS[d]
        pts.append((sj - 0.5 + dj * length / 2.0, si - 0.5 + di * length / 2.0))
    return _drop_collinear(np.asarray(pts, dtype=np.float64))


def _drop_collinear(pts: np.ndarray) -> np.ndarray:
    """Remove vertices that sit exactly on the segment between their neighbors."""
    if len(pts) < 3:
        return pts
    prev_pts = np.roll(pts, 1, axis=0)
    next_pts = np.roll(pts, -1, axis=0)
    a = pts - prev_pts
    b = next_pts - pts
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    keep = np.abs(cross) > 1e-12  # coords are multiples of 0.5, exact test is safe
    if keep.all():
        return pts
    return pts[keep]


def _polyline_length(pts: np.ndarray) -> float:
    closed = np.vstack([pts, pts[:1]])
    seg = np.diff(closed, axis=0)
    return float(np.hypot(seg[:, 0], seg[:, 1]).sum())


def _trace_pixels(rows: np.ndarray, cols: np.ndarray, connectivity: int) -> np.ndarray:
    """Polygon for a pixel set, in full-image coordinates."""
    r0, c0 = int(rows.min()), int(cols.min())
    h = int(rows.max()) - r0 + 1
    w = int(cols.max()) - c0 + 1
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[rows - r0 + 1, cols - c0 + 1] = True
    runs = _boundary_runs(padded, connectivity)
    pts = _polygon_from_runs(runs)
    pts[:, 0] += c0 - 1
    pts[:, 1] += r0 - 1
    return pts


def trace_contour(region: Region, mask: BinaryMask) -> np.ndarray:
    """Outer contour of a region as an (N, 2) array of (x, y) vertices.

    The polygon is closed implicitly (last vertex connects back to the
    first). mask must be the mask the region was labeled from; a region
    whose pixels are not all set in it is rejected.
    """
    if not mask.bits[region.rows, region.cols].all():
        raise ValueError("region pixels are not foreground in the supplied mask")
    return _trace_pixels(region.rows, region.cols, region.connectivity)


def circularity(area: float, perimeter: float) -> float:
    """Shape compactness 4*pi*area/perimeter**2; 1.0 for an ideal disk."""
    if not (area > 0):
        raise ValueError(f"area must be positive, got {area}")
    if not (perimeter > 0):
        raise ValueError(f"perimeter must be positive, got {perimeter}")
    return 4.0 * np.pi * float(area) / float(perimeter) ** 2


def label_components(
    mask: BinaryMask,
    connectivity: int = 8,
    intensity: RasterImage | None = None,
) -> list[Region]:
    """Connected components of a mask, labeled 1..K in raster-scan order.

    connectivity is 4 or 8. Labels are assigned by first-encounter order of
    the raster scan, so output is stable across runs. When an intensity
    image of the same (H, W) is given, per-region per-channel means are
    recorded on each Region. Regions are assumed hole-free (fill holes
    upstream); perimeter measures the outer contour only.
    """
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    bits = mask.bits
    if intensity is not None and intensity.pixels.shape[:2] != bits.shape:
        raise ValueError("intensity image shape does not match mask")
    structure = np.ones((3, 3), dtype=bool) if connectivity == 8 else None
    labels, count = ndimage.label(bits, structure=structure)
    if count == 0:
        return []

    flat = labels.ravel()
    first_seen = ndimage.minimum(
        np.arange(flat.size, dtype=np.int64), labels=flat, index=np.arange(1, count + 1)
    )
    rank = np.argsort(first_seen, kind="stable")  # rank -> original label - 1

    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=count + 1)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    width = bits.shape[1]
    regions: list[Region] = []
    for new_label, orig in enumerate(rank, start=1):
        lab = int(orig) + 1
        sl = order[starts[lab] : starts[lab] + counts[lab]]
        rows = (sl // width).astype(np.intp)
        cols = (sl % width).astype(np.intp)
        mean_int = None
        if intensity is not None:
            sample = intensity.pixels[rows, cols]
            if sample.ndim == 1:
                mean_int = (float(sample.mean()),)
            else:
                mean_int = tuple(float(v) for v in sample.mean(axis=0))
        pts = _trace_pixels(rows, cols, connectivity)
        regions.append(
            Region(
                label=new_label,
                pixel_count=int(counts[lab]),
                centroid=(float(cols.mean()), float(rows.mean())),
                bounding_box=(
                    int(cols.min()),
                    int(rows.min()),
                    int(cols.max()) + 1,
                    int(rows.max()) + 1,
                ),
                perimeter=_polyline_length(pts),
                mean_intensity=mean_int,
                rows=rows,
                cols=cols,
                connectivity=connectivity,
            )
        )
    return regions
