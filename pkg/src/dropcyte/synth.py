"""Synthetic scene renderer with analytic ground truth.

Scenes place non-overlapping droplets (bright-field) or fluorescent cells on a
uniform background and render them with 4x4 supersampled coverage, optional
per-frame drift, exposure gain, and seeded Gaussian noise. Every quantity in
the returned ground truth (centers, areas, perimeters, dye fractions, shifts,
gains) is derived from the scene description, never from rendered pixels, so
renders can serve as an independent oracle for the measurement code.

Droplet interiors follow the absorbance model I_c = bg_c * 10**(-sum_i c_i *
od_i,c) with a darkened rim ring; cells are drawn as filled shapes (disk,
ellipse, star, or a bleb morph that grows lobes with t) whose area and
perimeter come from the defining polygon or closed form.
"""

from __future__ import annotations

import colorsys
import configparser
import io
import math
from dataclasses import dataclass, field

import numpy as np

from dropcyte.core import RasterImage

SUPERSAMPLE = 4
# bleb morph: radial polygon r(theta) = R * (1 + t * AMP * cos(LOBES * theta + PHASE))
BLEB_AMP = 0.35
BLEB_LOBES = 7
BLEB_PHASE = 0.3
BLEB_VERTICES = 252
STAR_VERTICES_PER_POINT = 2


class SceneError(ValueError):
    """Scene description is inconsistent or unrenderable."""


@dataclass(frozen=True)
class DyeSpec:
    """Absorbing dye with a unit optical-density direction."""

    name: str
    od_vector: tuple[float, float, float]

    def __post_init__(self):
        vec = np.asarray(self.od_vector, dtype=np.float64)
        if vec.shape != (3,) or not np.all(np.isfinite(vec)) or np.any(vec < 0):
            raise SceneError(f"dye {self.name!r}: od_vector must be 3 nonnegative values")
        norm = float(np.linalg.norm(vec))
        if norm < 1e-6:
            raise SceneError(f"dye {self.name!r}: od_vector is zero")
        if abs(norm - 1.0) > 1e-12:  # already-unit vectors round-trip exactly
            vec = vec / norm
        object.__setattr__(self, "od_vector", tuple(float(v) for v in vec))


@dataclass(frozen=True)
class DropletSpec:
    """Circular droplet: absorbance interior plus a darkened rim ring."""

    center: tuple[float, float]
    diameter: float
    concentrations: dict[str, float] = field(default_factory=dict)
    rim_darkness: float = 0.55  # rim intensity multiplier; 1.0 disables the rim
    rim_width: float = 4.0

    def __post_init__(self):
        if not (self.diameter > 4):
            raise SceneError(f"droplet diameter must exceed 4 px, got {self.diameter}")
        if not (0 < self.rim_darkness <= 1):
            raise SceneError("rim_darkness must be in (0, 1]")
        if not (0 <= self.rim_width < self.diameter / 2):
            raise SceneError("rim_width must be nonnegative and below the radius")
        for name, conc in self.concentrations.items():
            if not (conc >= 0) or not math.isfinite(conc):
                raise SceneError(f"droplet dye {name!r}: concentration must be >= 0")


@dataclass(frozen=True)
class SpeckleSpec:
    """Dark debris dot (bright-field distractor); never part of the truth objects."""

    center: tuple[float, float]
    diameter: float
    darkness: float = 0.45  # intensity multiplier on the background

    def __post_init__(self):
        if not (0 < self.diameter) or not math.isfinite(self.diameter):
            raise SceneError(f"speckle diameter must be positive, got {self.diameter}")
        if not (0 <= self.darkness < 1):
            raise SceneError("speckle darkness must be in [0, 1)")


@dataclass(frozen=True)
class CellSpec:
    """Fluorescent cell; shape grammar: 'disk', 'ellipse A B', 'star POINTS INNER_R', 'bleb T'."""

    center: tuple[float, float]
    radius: float
    shape: str = "disk"
    color: tuple[int, int, int] = (40, 255, 60)
    intensity: float = 1.0

    def __post_init__(self):
        if not (self.radius > 1):
            raise SceneError(f"cell radius must exceed 1 px, got {self.radius}")
        if not (0 < self.intensity <= 1):
            raise SceneError("cell intensity must be in (0, 1]")
        if any(not (0 <= v <= 255) for v in self.color):
            raise SceneError(f"cell color out of range: {self.color}")
        _parse_shape(self.shape, self.radius)  # reject malformed shapes at build time


@dataclass(frozen=True)
class SceneSpec:
    """Full scene plus acquisition model (drift, gains, noise, seed)."""

    width: int
    height: int
    background: tuple[int, int, int]
    dyes: tuple[DyeSpec, ...] = ()
    droplets: tuple[DropletSpec, ...] = ()
    cells: tuple[CellSpec, ...] = ()
    speckles: tuple[SpeckleSpec, ...] = ()
    noise_sigma: float = 0.0
    seed: int = 0
    frames: int = 1
    drift: tuple[float, float] = (0.0, 0.0)
    gains: tuple[float, ...] = ()
    pixel_pitch: float | None = None

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise SceneError("canvas must be at least 8x8")
        if any(not (0 <= v <= 255) for v in self.background):
            raise SceneError(f"background out of range: {self.background}")
        if not (self.noise_sigma >= 0):
            raise SceneError("noise_sigma must be >= 0")
        if self.frames < 1:
            raise SceneError("frames must be >= 1")
        if self.gains and len(self.gains) != self.frames:
            raise SceneError(f"got {len(self.gains)} gains for {self.frames} frames")
        if any(not (g > 0) for g in self.gains):
            raise SceneError("exposure gains must be positive")
        names = [d.name for d in self.dyes]
        if len(set(names)) != len(names):
            raise SceneError("dye names must be unique")
        known = set(names)
        for k, drop in enumerate(self.droplets):
            unknown = set(drop.concentrations) - known
            if unknown:
                raise SceneError(f"droplet {k} references unknown dye(s): {sorted(unknown)}")

    def frame_gain(self, index: int) -> float:
        return self.gains[index] if self.gains else 1.0


@dataclass(frozen=True)
class ObjectTruth:
    """Generator-side facts about one scene object (frame-0 geometry)."""

    kind: str  # "droplet" | "cell"
    index: int
    center: tuple[float, float]
    area: float
    perimeter: float
    circularity: float
    diameter: float | None = None
    dye_fractions: dict[str, float] | None = None
    empty: bool | None = None
    color_class: str | None = None


@dataclass(frozen=True)
class GroundTruth:
    """Everything a measurement should recover from the rendered frames."""

    objects: tuple[ObjectTruth, ...]
    shifts: tuple[tuple[float, float], ...]
    gains: tuple[float, ...]
    noise_sigma: float
    seed: int
    pixel_pitch: float | None


# ---------------------------------------------------------------------------
# shape geometry


def _parse_shape(shape: str, radius: float):
    """Parse the shape grammar into (kind, params); raises SceneError on garbage."""
    tokens = shape.split()
    if not tokens:
        raise SceneError("empty shape")
    kind = tokens[0]
    try:
        if kind == "disk":
            if len(tokens) != 1:
                raise SceneError(f"disk takes no parameters: {shape!r}")
            return ("disk",)
        if kind == "ellipse":
            a, b = float(tokens[1]), float(tokens[2])
            if not (a > 0 and b > 0):
                raise SceneError(f"ellipse semi-axes must be positive: {shape!r}")
            return ("ellipse", a, b)
        if kind == "star":
            points, inner = int(tokens[1]), float(tokens[2])
            if points < 3:
                raise SceneError("star needs at least 3 points")
            if not (0 < inner < radius):
                raise SceneError("star inner radius must be in (0, outer radius)")
            return ("star", points, inner)
        if kind == "bleb":
            t = float(tokens[1])
            if not (0 <= t <= 1):
                raise SceneError("bleb morph parameter must be in [0, 1]")
            return ("bleb", t)
    except (IndexError, ValueError) as exc:
        raise SceneError(f"malformed shape {shape!r}") from exc
    raise SceneError(f"unknown shape kind {kind!r}")


def _radial_polygon(cell: CellSpec, center: tuple[float, float]) -> np.ndarray | None:
    """Vertices of star/bleb shapes, equally spaced in angle; None for disk/ellipse."""
    parsed = _parse_shape(cell.shape, cell.radius)
    cx, cy = center
    if parsed[0] == "star":
        points, inner = parsed[1], parsed[2]
        m = STAR_VERTICES_PER_POINT * points
        theta = -np.pi / 2 + 2 * np.pi * np.arange(m) / m
        radii = np.where(np.arange(m) % 2 == 0, cell.radius, inner)
    elif parsed[0] == "bleb":
        t = parsed[1]
        m = BLEB_VERTICES
        theta = 2 * np.pi * np.arange(m) / m
        radii = cell.radius * (1 + t * BLEB_AMP * np.cos(BLEB_LOBES * theta + BLEB_PHASE))
    else:
        return None
    return np.column_stack([cx + radii * np.cos(theta), cy + radii * np.sin(theta)])


def _polygon_area_perimeter(verts: np.ndarray) -> tuple[float, float]:
    x, y = verts[:, 0], verts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    area = 0.5 * abs(float(np.sum(x * yn - xn * y)))
    perim = float(np.hypot(xn - x, yn - y).sum())
    return area, perim


def _cell_extent(cell: CellSpec) -> float:
    parsed = _parse_shape(cell.shape, cell.radius)
    if parsed[0] == "ellipse":
        return max(parsed[1], parsed[2])
    if parsed[0] == "bleb":
        return cell.radius * (1 + parsed[1] * BLEB_AMP)
    return cell.radius


def _cell_geometry(cell: CellSpec) -> tuple[float, float]:
    """Analytic (area, perimeter) for a cell shape at frame-0 placement."""
    parsed = _parse_shape(cell.shape, cell.radius)
    if parsed[0] == "disk":
        return math.pi * cell.radius**2, 2 * math.pi * cell.radius
    if parsed[0] == "ellipse":
        a, b = parsed[1], parsed[2]
        h = ((a - b) / (a + b)) ** 2
        perim = math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))
        return math.pi * a * b, perim
    verts = _radial_polygon(cell, cell.center)
    return _polygon_area_perimeter(verts)


def _color_class(color: tuple[int, int, int]) -> str:
    hue = colorsys.rgb_to_hsv(color[0] / 255, color[1] / 255, color[2] / 255)[0] * 360
    if 90 <= hue < 150:
        return "green"
    if hue >= 330 or hue < 30:
        return "red"
    return "other"


# ---------------------------------------------------------------------------
# rasterization


def _subgrid(x0: int, x1: int, y0: int, y1: int) -> tuple[np.ndarray, np.ndarray]:
    """Supersample coordinates covering pixels [x0, x1) x [y0, y1)."""
    ss = SUPERSAMPLE
    fx = x0 + (np.arange((x1 - x0) * ss) + 0.5) / ss - 0.5
    fy = y0 + (np.arange((y1 - y0) * ss) + 0.5) / ss - 0.5
    return np.meshgrid(fx, fy)


def _block_mean(fine: np.ndarray) -> np.ndarray:
    ss = SUPERSAMPLE
    h, w = fine.shape[0] // ss, fine.shape[1] // ss
    return fine.reshape(h, ss, w, ss).mean(axis=(1, 3))


def _bbox(center, extent, width, height) -> tuple[int, int, int, int]:
    cx, cy = center
    x0 = max(0, int(math.floor(cx - extent - 2)))
    x1 = min(width, int(math.ceil(cx + extent + 3)))
    y0 = max(0, int(math.floor(cy - extent - 2)))
    y1 = min(height, int(math.ceil(cy + extent + 3)))
    return x0, x1, y0, y1


def _coverage_disk(center, radius, x0, x1, y0, y1) -> np.ndarray:
    gx, gy = _subgrid(x0, x1, y0, y1)
    inside = (gx - center[0]) ** 2 + (gy - center[1]) ** 2 <= radius**2
    return _block_mean(inside)


def _coverage_ellipse(center, a, b, x0, x1, y0, y1) -> np.ndarray:
    gx, gy = _subgrid(x0, x1, y0, y1)
    inside = ((gx - center[0]) / a) ** 2 + ((gy - center[1]) / b) ** 2 <= 1.0
    return _block_mean(inside)


def _coverage_radial_polygon(verts, center, x0, x1, y0, y1) -> np.ndarray:
    """Coverage of a star-shaped polygon with equal angular vertex spacing."""
    m = len(verts)
    cx, cy = center
    theta0 = math.atan2(verts[0, 1] - cy, verts[0, 0] - cx)
    gx, gy = _subgrid(x0, x1, y0, y1)
    ang = np.arctan2(gy - cy, gx - cx) - theta0
    k = np.floor(ang / (2 * np.pi / m)).astype(np.int64) % m
    kn = (k + 1) % m
    ax, ay = verts[k, 0], verts[k, 1]
    ex, ey = verts[kn, 0] - ax, verts[kn, 1] - ay
    side = ex * (gy - ay) - ey * (gx - ax)
    center_side = ex * (cy - ay) - ey * (cx - ax)
    inside = side * center_side >= 0
    return _block_mean(inside)


def _cell_coverage(cell: CellSpec, center, x0, x1, y0, y1) -> np.ndarray:
    parsed = _parse_shape(cell.shape, cell.radius)
    if parsed[0] == "disk":
        return _coverage_disk(center, cell.radius, x0, x1, y0, y1)
    if parsed[0] == "ellipse":
        return _coverage_ellipse(center, parsed[1], parsed[2], x0, x1, y0, y1)
    verts = _radial_polygon(cell, center)
    return _coverage_radial_polygon(verts, center, x0, x1, y0, y1)


def _droplet_color(spec: SceneSpec, droplet: DropletSpec) -> np.ndarray:
    od = np.zeros(3)
    for dye in spec.dyes:
        conc = droplet.concentrations.get(dye.name, 0.0)
        od += conc * np.asarray(dye.od_vector)
    return np.asarray(spec.background, dtype=np.float64) * 10.0 ** (-od)


def _validate_layout(spec: SceneSpec, shift: tuple[float, float], frame_index: int):
    """Bounds and pairwise-overlap checks at a given frame shift."""
    objs = [("droplet", k, d.center, d.diameter / 2) for k, d in enumerate(spec.droplets)]
    objs += [("cell", k, c.center, _cell_extent(c)) for k, c in enumerate(spec.cells)]
    objs += [("speckle", k, s.center, s.diameter / 2) for k, s in enumerate(spec.speckles)]
    for kind, k, (cx, cy), ext in objs:
        cx, cy = cx + shift[0], cy + shift[1]
        if cx - ext < 1 or cy - ext < 1 or cx + ext > spec.width - 2 or cy + ext > spec.height - 2:
            raise SceneError(f"frame {frame_index}: {kind} {k} leaves the canvas")
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            (_, _, (x1, y1), e1), (_, _, (x2, y2), e2) = objs[i], objs[j]
            if math.hypot(x2 - x1, y2 - y1) < e1 + e2 + 2:
                raise SceneError(
                    f"frame {frame_index}: {objs[i][0]} {objs[i][1]} overlaps "
                    f"{objs[j][0]} {objs[j][1]}"
                )


def _render_frame(
    spec: SceneSpec,
    mode: str,
    shift: tuple[float, float],
    gain: float,
    rng: np.random.Generator,
    frame_index: int,
) -> RasterImage:
    _validate_layout(spec, shift, frame_index)
    h, w = spec.height, spec.width
    canvas = np.full((h, w, 3), spec.background, dtype=np.float64)

    if mode == "brightfield":
        for droplet in spec.droplets:
            cx, cy = droplet.center[0] + shift[0], droplet.center[1] + shift[1]
            radius = droplet.diameter / 2
            x0, x1, y0, y1 = _bbox((cx, cy), radius, w, h)
            cov_full = _coverage_disk((cx, cy), radius, x0, x1, y0, y1)
            core_r = max(radius - droplet.rim_width, 0.0)
            cov_core = _coverage_disk((cx, cy), core_r, x0, x1, y0, y1)
            interior = _droplet_color(spec, droplet)
            rim = interior * droplet.rim_darkness
            patch = canvas[y0:y1, x0:x1]
            patch *= 1 - cov_full[..., None]
            patch += rim * (cov_full - cov_core)[..., None]
            patch += interior * cov_core[..., None]
        for speckle in spec.speckles:
            cx, cy = speckle.center[0] + shift[0], speckle.center[1] + shift[1]
            radius = speckle.diameter / 2
            x0, x1, y0, y1 = _bbox((cx, cy), radius, w, h)
            cov = _coverage_disk((cx, cy), radius, x0, x1, y0, y1)
            patch = canvas[y0:y1, x0:x1]
            patch *= 1 - (1 - speckle.darkness) * cov[..., None]
    elif mode == "fluorescence":
        for cell in spec.cells:
            cx, cy = cell.center[0] + shift[0], cell.center[1] + shift[1]
            x0, x1, y0, y1 = _bbox((cx, cy), _cell_extent(cell), w, h)
            cov = _cell_coverage(cell, (cx, cy), x0, x1, y0, y1)
            emission = np.asarray(cell.color, dtype=np.float64) * cell.intensity
            canvas[y0:y1, x0:x1] += emission * cov[..., None]
    else:
        raise ValueError(f"unknown render mode {mode!r}")

    canvas *= gain
    if spec.noise_sigma > 0:
        canvas += rng.normal(0.0, spec.noise_sigma, size=canvas.shape)
    pixels = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return RasterImage(pixels, pixel_pitch=spec.pixel_pitch)


def _ground_truth(spec: SceneSpec, n_frames: int) -> GroundTruth:
    objects: list[ObjectTruth] = []
    for k, droplet in enumerate(spec.droplets):
        radius = droplet.diameter / 2
        total = sum(droplet.concentrations.values())
        if total > 0:
            fractions = {n: c / total for n, c in droplet.concentrations.items()}
        else:
            fractions = {n: 0.0 for n in droplet.concentrations}
        area = math.pi * radius**2
        perim = math.pi * droplet.diameter
        objects.append(
            ObjectTruth(
                kind="droplet",
                index=k,
                center=droplet.center,
                area=area,
                perimeter=perim,
                circularity=4 * math.pi * area / perim**2,
                diameter=droplet.diameter,
                dye_fractions=fractions,
                empty=total <= 0,
            )
        )
    for k, cell in enumerate(spec.cells):
        area, perim = _cell_geometry(cell)
        objects.append(
            ObjectTruth(
                kind="cell",
                index=k,
                center=cell.center,
                area=area,
                perimeter=perim,
                circularity=4 * math.pi * area / perim**2,
                color_class=_color_class(cell.color),
            )
        )
    shifts = tuple(
        (spec.drift[0] * i + 0.0, spec.drift[1] * i + 0.0) for i in range(n_frames)
    )
    gains = tuple(spec.frame_gain(i) for i in range(n_frames))
    return GroundTruth(
        objects=tuple(objects),
        shifts=shifts,
        gains=gains,
        noise_sigma=spec.noise_sigma,
        seed=spec.seed,
        pixel_pitch=spec.pixel_pitch,
    )


def render_brightfield(spec: SceneSpec) -> tuple[RasterImage, GroundTruth]:
    """Render frame 0 of the bright-field view (droplets on light background)."""
    rng = np.random.default_rng(spec.seed)
    frame = _render_frame(spec, "brightfield", (0.0, 0.0), spec.frame_gain(0), rng, 0)
    return frame, _ground_truth(spec, 1)


def render_fluorescence(spec: SceneSpec) -> tuple[RasterImage, GroundTruth]:
    """Render frame 0 of the fluorescence view (cells on dark background)."""
    rng = np.random.default_rng(spec.seed)
    frame = _render_frame(spec, "fluorescence", (0.0, 0.0), spec.frame_gain(0), rng, 0)
    return frame, _ground_truth(spec, 1)


def render_sequence(
    spec: SceneSpec,
    n_frames: int | None = None,
    mode: str = "brightfield",
) -> tuple[list[RasterImage], GroundTruth]:
    """Render a drifting sequence (spec.frames frames unless n_frames overrides).

    Frame i shifts every object by i * drift (re-rendered at the shifted
    position, so subpixel motion is exact) and multiplies exposure by
    gains[i]. Noise is drawn from one seeded generator in frame order, so
    identical specs give byte-identical sequences. A shift that pushes any
    object off the canvas raises SceneError naming the frame.
    """
    n = spec.frames if n_frames is None else n_frames
    if n < 1:
        raise SceneError("n_frames must be >= 1")
    if spec.gains and len(spec.gains) < n:
        raise SceneError(f"got {len(spec.gains)} gains for {n} frames")
    rng = np.random.default_rng(spec.seed)
    truth = _ground_truth(spec, n)
    frames = [
        _render_frame(spec, mode, truth.shifts[i], truth.gains[i], rng, i)
        for i in range(n)
    ]
    return frames, truth


# ---------------------------------------------------------------------------
# scene file round trip


def scene_to_text(spec: SceneSpec) -> str:
    """Serialize a scene to INI text; floats keep full repr precision."""
    cp = configparser.ConfigParser()
    cp["canvas"] = {
        "width": str(spec.width),
        "height": str(spec.height),
        "background": " ".join(str(v) for v in spec.background),
        "noise_sigma": repr(spec.noise_sigma),
        "seed": str(spec.seed),
    }
    if spec.pixel_pitch is not None:
        cp["canvas"]["pixel_pitch"] = repr(spec.pixel_pitch)
    cp["sequence"] = {
        "frames": str(spec.frames),
        "drift": f"{spec.drift[0]!r} {spec.drift[1]!r}",
    }
    if spec.gains:
        cp["sequence"]["gains"] = " ".join(repr(g) for g in spec.gains)
    for dye in spec.dyes:
        cp[f"dye {dye.name}"] = {"od": " ".join(repr(v) for v in dye.od_vector)}
    for k, d in enumerate(spec.droplets):
        cp[f"droplet {k}"] = {
            "center": f"{d.center[0]!r} {d.center[1]!r}",
            "diameter": repr(d.diameter),
            "mix": " ".join(f"{n}:{c!r}" for n, c in d.concentrations.items()),
            "rim_darkness": repr(d.rim_darkness),
            "rim_width": repr(d.rim_width),
        }
    for k, c in enumerate(spec.cells):
        cp[f"cell {k}"] = {
            "center": f"{c.center[0]!r} {c.center[1]!r}",
            "radius": repr(c.radius),
            "shape": c.shape,
            "color": " ".join(str(v) for v in c.color),
            "intensity": repr(c.intensity),
        }
    for k, s in enumerate(spec.speckles):
        cp[f"speckle {k}"] = {
            "center": f"{s.center[0]!r} {s.center[1]!r}",
            "diameter": repr(s.diameter),
            "darkness": repr(s.darkness),
        }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


_CANVAS_KEYS = {"width", "height", "background", "noise_sigma", "seed", "pixel_pitch"}
_SEQUENCE_KEYS = {"frames", "drift", "gains"}
_DROPLET_KEYS = {"center", "diameter", "mix", "rim_darkness", "rim_width"}
_CELL_KEYS = {"center", "radius", "shape", "color", "intensity"}
_SPECKLE_KEYS = {"center", "diameter", "darkness"}


def _check_keys(section: str, present, allowed: set[str]):
    unknown = set(present) - allowed
    if unknown:
        raise SceneError(f"[{section}]: unknown key(s) {sorted(unknown)}")


def _floats(text: str) -> list[float]:
    return [float(tok) for tok in text.split()]


def scene_from_text(text: str) -> SceneSpec:
    """Parse scene INI text; unknown sections or keys are errors."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise SceneError(f"unparseable scene file: {exc}") from exc
    if "canvas" not in cp:
        raise SceneError("scene file needs a [canvas] section")

    canvas = cp["canvas"]
    _check_keys("canvas", canvas.keys(), _CANVAS_KEYS)
    try:
        background = tuple(int(v) for v in canvas.get("background", "240 240 240").split())
        kwargs: dict = {
            "width": canvas.getint("width"),
            "height": canvas.getint("height"),
            "background": background,
            "noise_sigma": canvas.getfloat("noise_sigma", 0.0),
            "seed": canvas.getint("seed", 0),
        }
        if "pixel_pitch" in canvas:
            kwargs["pixel_pitch"] = canvas.getfloat("pixel_pitch")

        if "sequence" in cp:
            seq = cp["sequence"]
            _check_keys("sequence", seq.keys(), _SEQUENCE_KEYS)
            kwargs["frames"] = seq.getint("frames", 1)
            drift = _floats(seq.get("drift", "0 0"))
            kwargs["drift"] = (drift[0], drift[1])
            if "gains" in seq:
                kwargs["gains"] = tuple(_floats(seq["gains"]))

        dyes, droplets, cells, speckles = [], [], [], []
        for section in cp.sections():
            if section in ("canvas", "sequence"):
                continue
            head, _, rest = section.partition(" ")
            body = cp[section]
            if head == "dye":
                if not rest:
                    raise SceneError(f"[{section}]: dye sections are named [dye <name>]")
                _check_keys(section, body.keys(), {"od"})
                od = _floats(body["od"])
                dyes.append(DyeSpec(rest, (od[0], od[1], od[2])))
            elif head == "droplet":
                _check_keys(section, body.keys(), _DROPLET_KEYS)
                cx, cy = _floats(body["center"])
                mix = {}
                for token in body.get("mix", "").split():
                    name, _, conc = token.partition(":")
                    mix[name] = float(conc)
                droplets.append(
                    DropletSpec(
                        center=(cx, cy),
                        diameter=body.getfloat("diameter"),
                        concentrations=mix,
                        rim_darkness=body.getfloat("rim_darkness", 0.55),
                        rim_width=body.getfloat("rim_width", 4.0),
                    )
                )
            elif head == "cell":
                _check_keys(section, body.keys(), _CELL_KEYS)
                cx, cy = _floats(body["center"])
                color = tuple(int(v) for v in body.get("color", "40 255 60").split())
                cells.append(
                    CellSpec(
                        center=(cx, cy),
                        radius=body.getfloat("radius"),
                        shape=body.get("shape", "disk"),
                        color=color,
                        intensity=body.getfloat("intensity", 1.0),
                    )
                )
            elif head == "speckle":
                _check_keys(section, body.keys(), _SPECKLE_KEYS)
                cx, cy = _floats(body["center"])
                speckles.append(
                    SpeckleSpec(
                        center=(cx, cy),
                        diameter=body.getfloat("diameter"),
                        darkness=body.getfloat("darkness", 0.45),
                    )
                )
            else:
                raise SceneError(f"unknown section [{section}]")
    except SceneError:
        raise
    except Exception as exc:
        raise SceneError(f"bad scene value: {exc}") from exc

    return SceneSpec(
        dyes=tuple(dyes),
        droplets=tuple(droplets),
        cells=tuple(cells),
        speckles=tuple(speckles),
        **kwargs,
    )
