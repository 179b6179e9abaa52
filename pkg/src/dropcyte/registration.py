"""Translation-only frame registration with exposure normalization.

Shifts are estimated by zero-padded FFT cross-correlation of mean-subtracted
grayscale frames, restricted to a +/-max_shift search window, with a
separable three-point parabola refining the peak to subpixel precision.
Every frame of a sequence is registered against frame 0 (not chained), so
alignment error does not accumulate over long drifts.

Sign convention: Shift(dx, dy) is the displacement of the moving frame's
content relative to the reference; apply_translation moves it back.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from dropcyte.core import RasterImage

DEFAULT_MAX_SHIFT = 64
# Parabolic refinements below this are dominated by the zero-padding boundary
# terms of the correlation (empirically ~1e-3 px), not real displacement, so
# they are snapped to the integer peak.
SUBPIXEL_DEADBAND = 0.01


class FeaturelessFrameError(ValueError):
    """Frame has no intensity structure; any shift would be spurious."""


@dataclass(frozen=True)
class Shift:
    """Estimated translation (pixels) and normalized peak correlation in [0, 1]."""

    dx: float
    dy: float
    confidence: float


@dataclass(frozen=True, eq=False)
class ExposureResult:
    """Exposure-normalized frame with the per-channel gains that were applied.

    Channels whose mean is near zero keep unit gain and are listed in
    skipped rather than blowing up the scale.
    """

    image: RasterImage
    gains: tuple[float, ...]
    skipped: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class AlignResult:
    """align_sequence output: frames resampled onto frame 0's grid."""

    frames: list[RasterImage]
    shifts: list[Shift]
    gains: list[tuple[float, ...]]
    warnings: list[str]


_CHANNEL_NAMES = ("r", "g", "b")


def normalize_exposure(frame: RasterImage, reference: RasterImage) -> ExposureResult:
    """Scale each channel so its mean matches the reference frame's mean."""
    if frame.pixels.shape != reference.pixels.shape:
        raise ValueError("frame and reference shapes differ")
    pixels = frame.pixels.astype(np.float64)
    ref = reference.pixels.astype(np.float64)
    if pixels.ndim == 2:
        pixels = pixels[..., None]
        ref = ref[..., None]
    gains, skipped = [], []
    out = np.empty_like(pixels)
    for c in range(pixels.shape[2]):
        mean = pixels[..., c].mean()
        if mean < 1.0:
            gain = 1.0
            skipped.append(_CHANNEL_NAMES[c] if pixels.shape[2] == 3 else "gray")
        else:
            gain = ref[..., c].mean() / mean
        gains.append(float(gain))
        out[..., c] = pixels[..., c] * gain
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    if frame.pixels.ndim == 2:
        out = out[..., 0]
    return ExposureResult(
        image=RasterImage(out, pixel_pitch=frame.pixel_pitch),
        gains=tuple(gains),
        skipped=tuple(skipped),
    )


def _parabolic_offset(lo: float, mid: float, hi: float) -> float:
    denom = lo - 2.0 * mid + hi
    if abs(denom) < 1e-12:
        return 0.0
    delta = 0.5 * (lo - hi) / denom
    if abs(delta) < SUBPIXEL_DEADBAND:
        return 0.0
    return float(np.clip(delta, -0.5, 0.5))


def estimate_translation(
    reference: RasterImage,
    moving: RasterImage,
    max_shift: int = DEFAULT_MAX_SHIFT,
) -> Shift:
    """Translation of moving relative to reference via FFT cross-correlation.

    The correlation is evaluated on zero-padded, mean-subtracted luminance,
    so only displacements within +/-max_shift px are considered. Integer
    peaks are refined by a separable 3-point parabola (clamped to half a
    pixel). Raises FeaturelessFrameError when either frame is flat.
    """
    if reference.pixels.shape[:2] != moving.pixels.shape[:2]:
        raise ValueError("reference and moving frame sizes differ")
    if max_shift < 1:
        raise ValueError("max_shift must be >= 1")
    a = reference.gray()
    b = moving.gray()
    a -= a.mean()
    b -= b.mean()
    norm_a = float(np.sqrt((a * a).sum()))
    norm_b = float(np.sqrt((b * b).sum()))
    if norm_a < 1e-9:
        raise FeaturelessFrameError("reference frame is featureless")
    if norm_b < 1e-9:
        raise FeaturelessFrameError("moving frame is featureless")

    height, width = a.shape
    shape = (height + max_shift, width + max_shift)  # zero padding; window stays alias-free
    spec_a = np.fft.rfft2(a, shape)
    spec_b = np.fft.rfft2(b, shape)
    corr = np.fft.irfft2(np.conj(spec_a) * spec_b, shape)

    offsets = np.arange(-max_shift, max_shift + 1)
    window = corr[np.ix_(offsets % shape[0], offsets % shape[1])] / (norm_a * norm_b)
    peak = int(np.argmax(window))
    iy, ix = divmod(peak, window.shape[1])
    confidence = float(np.clip(window[iy, ix], 0.0, 1.0))

    dy = float(offsets[iy])
    dx = float(offsets[ix])
    if 0 < iy < window.shape[0] - 1:
        dy += _parabolic_offset(window[iy - 1, ix], window[iy, ix], window[iy + 1, ix])
    if 0 < ix < window.shape[1] - 1:
        dx += _parabolic_offset(window[iy, ix - 1], window[iy, ix], window[iy, ix + 1])
    return Shift(dx=dx, dy=dy, confidence=confidence)


def apply_translation(image: RasterImage, shift: Shift) -> RasterImage:
    """Resample the image so its content moves by (-dx, -dy), onto the reference grid.

    Bilinear interpolation; pixels pulled in from outside the frame take the
    per-channel median, which keeps later thresholding stable near borders.
    """
    pixels = image.pixels
    if pixels.ndim == 2:
        shifted = ndimage.shift(
            pixels.astype(np.float64),
            shift=(-shift.dy, -shift.dx),
            order=1,
            mode="constant",
            cval=float(np.median(pixels)),
        )
        out = np.clip(np.rint(shifted), 0, 255).astype(np.uint8)
        return RasterImage(out, pixel_pitch=image.pixel_pitch)
    out = np.empty_like(pixels)
    for c in range(pixels.shape[2]):
        channel = pixels[..., c].astype(np.float64)
        shifted = ndimage.shift(
            channel,
            shift=(-shift.dy, -shift.dx),
            order=1,
            mode="constant",
            cval=float(np.median(pixels[..., c])),
        )
        out[..., c] = np.clip(np.rint(shifted), 0, 255).astype(np.uint8)
    return RasterImage(out, pixel_pitch=image.pixel_pitch)


def align_sequence(
    frames: Sequence[RasterImage],
    max_shift: int = DEFAULT_MAX_SHIFT,
    workers: int | None = None,
) -> AlignResult:
    """Exposure-normalize and register every frame against frame 0.

    Frames that cannot be registered (featureless) pass through unshifted
    with zero confidence and a warning; the rest are resampled onto the
    reference grid. With workers > 1 the per-frame estimates run in a
    thread pool, emitted in frame order regardless of completion order.
    """
    if not frames:
        raise ValueError("empty frame sequence")
    reference = frames[0]
    n_channels = reference.channels
    identity = tuple(1.0 for _ in range(3 if n_channels == 3 else 1))
    results: list[tuple[RasterImage, Shift, tuple[float, ...], str | None]] = [
        (reference, Shift(0.0, 0.0, 1.0), identity, None)
    ]

    def register(index: int) -> tuple[RasterImage, Shift, tuple[float, ...], str | None]:
        normalized = normalize_exposure(frames[index], reference)
        try:
            shift = estimate_translation(reference, normalized.image, max_shift=max_shift)
        except FeaturelessFrameError as exc:
            return (
                normalized.image,
                Shift(0.0, 0.0, 0.0),
                normalized.gains,
                f"frame {index}: {exc}; passed through unaligned",
            )
        return normalized.image, shift, normalized.gains, None

    indices = range(1, len(frames))
    if workers and workers > 1 and len(frames) > 2:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rest = list(pool.map(register, indices))
    else:
        rest = [register(i) for i in indices]
    results.extend(rest)

    aligned, shifts, gains, warnings = [], [], [], []
    for index, (image, shift, gain, warning) in enumerate(results):
        needs_resample = index > 0 and warning is None and (shift.dx, shift.dy) != (0.0, 0.0)
        aligned.append(apply_translation(image, shift) if needs_resample else image)
        shifts.append(shift)
        gains.append(gain)
        if warning:
            warnings.append(warning)
    return AlignResult(frames=aligned, shifts=shifts, gains=gains, warnings=warnings)
