"""Absorbance-based dye separation for bright-field droplet imagery.

Pixels are converted to optical density OD_c = -log10(I_c / white_c) and
expressed as nonnegative combinations of calibrated unit dye vectors. With
at most three dyes the nonnegative least-squares fit is solved exactly by
evaluating every support subset and keeping the feasible fit with the
smallest residual, which vectorizes over all pixels at once.
"""

from __future__ import annotations

import configparser
import io
import itertools
import math
from dataclasses import dataclass

import numpy as np

from dropcyte.core import BinaryMask, RasterImage, Region

MAX_DYES = 3
MIN_SEPARATION_DEG = 5.0
MIN_SAMPLE_PIXELS = 20
MAX_CONDITION = 1e3
EMPTY_TOTAL = 1e-6


class CalibrationError(ValueError):
    """Calibration inputs cannot produce a usable stain basis."""


@dataclass(frozen=True, eq=False)
class StainBasis:
    """Calibrated dye system: unit OD directions plus the white point."""

    names: tuple[str, ...]
    matrix: np.ndarray  # (k, 3), rows are unit OD vectors
    white_point: tuple[float, float, float]

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[1] != 3:
            raise CalibrationError(f"stain matrix must be (k, 3), got {matrix.shape}")
        k = matrix.shape[0]
        if not (1 <= k <= MAX_DYES):
            raise CalibrationError(f"need 1..{MAX_DYES} dyes, got {k}")
        if len(self.names) != k or len(set(self.names)) != k:
            raise CalibrationError("dye names must be unique and match the matrix rows")
        norms = np.linalg.norm(matrix, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise CalibrationError("stain matrix rows must be unit vectors")
        matrix = matrix / norms[:, None]  # 6-decimal serialization drift -> exact unit
        if np.any(matrix < -1e-9):
            raise CalibrationError("OD vectors must be nonnegative")
        singulars = np.linalg.svd(matrix, compute_uv=False)
        if singulars[-1] <= 0 or singulars[0] / singulars[-1] > MAX_CONDITION:
            raise CalibrationError("stain matrix is ill-conditioned; dyes are too similar")
        wp = np.asarray(self.white_point, dtype=np.float64)
        if wp.shape != (3,) or np.any(wp < 1) or np.any(wp > 255):
            raise CalibrationError(f"white point must be 3 values in [1, 255], got {wp}")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "white_point", tuple(float(v) for v in wp))

    def to_text(self) -> str:
        """Serialize to INI text; OD components keep 6 decimals."""
        cp = configparser.ConfigParser()
        cp["basis"] = {"white_point": " ".join(f"{v:.6f}" for v in self.white_point)}
        for name, row in zip(self.names, self.matrix):
            cp[f"dye {name}"] = {"od": " ".join(f"{v:.6f}" for v in row)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "StainBasis":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise CalibrationError(f"unparseable stain basis: {exc}") from exc
        if "basis" not in cp or "white_point" not in cp["basis"]:
            raise CalibrationError("stain basis text needs [basis] white_point")
        unknown = set(cp["basis"].keys()) - {"white_point"}
        if unknown:
            raise CalibrationError(f"[basis]: unknown key(s) {sorted(unknown)}")
        white = tuple(float(v) for v in cp["basis"]["white_point"].split())
        names, rows = [], []
        for section in cp.sections():
            if section == "basis":
                continue
            head, _, name = section.partition(" ")
            if head != "dye" or not name:
                raise CalibrationError(f"unknown section [{section}]")
            unknown = set(cp[section].keys()) - {"od"}
            if unknown:
                raise CalibrationError(f"[{section}]: unknown key(s) {sorted(unknown)}")
            row = [float(v) for v in cp[section]["od"].split()]
            if len(row) != 3:
                raise CalibrationError(f"[{section}]: od needs 3 components")
            names.append(name)
            rows.append(row)
        if not names:
            raise CalibrationError("stain basis text defines no dyes")
        return cls(names=tuple(names), matrix=np.array(rows), white_point=white)


@dataclass(frozen=True, eq=False)
class ConcentrationMap:
    """Per-dye concentration images plus the per-pixel fit residual.

    Values are zero outside the unmixed ROI; residual is the L2 distance
    between the pixel OD and its reconstruction from the fitted dyes.
    """

    names: tuple[str, ...]
    maps: dict[str, np.ndarray]
    residual: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.residual.shape


def optical_density(samples: np.ndarray, white_point) -> np.ndarray:
    """OD_c = -log10(I_c / white_c), clamped to >= 0; intensities floor at 1."""
    white = np.maximum(np.asarray(white_point, dtype=np.float64), 1.0)
    values = np.maximum(np.asarray(samples, dtype=np.float64), 1.0)
    return np.clip(-np.log10(values / white), 0.0, None)


def calibrate(
    dye_samples: dict[str, np.ndarray],
    background_samples: np.ndarray,
) -> StainBasis:
    """Build a stain basis from single-dye pixel samples and background pixels.

    Each sample needs at least 20 pixels so the medians and means are not
    dominated by single-pixel noise. The white point is the per-channel
    median of the background sample. A dye whose mean OD is shorter than
    1e-3 is indistinguishable from background; two dyes closer than 5
    degrees cannot be separated. All raise CalibrationError.
    """
    if not (1 <= len(dye_samples) <= MAX_DYES):
        raise CalibrationError(f"need 1..{MAX_DYES} dye samples, got {len(dye_samples)}")
    background = np.asarray(background_samples, dtype=np.float64).reshape(-1, 3)
    if len(background) < MIN_SAMPLE_PIXELS:
        raise CalibrationError(
            f"background sample has {len(background)} pixels, need >= {MIN_SAMPLE_PIXELS}"
        )
    white = np.maximum(np.median(background, axis=0), 1.0)

    names, rows = [], []
    for name, samples in dye_samples.items():
        pixels = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
        if len(pixels) < MIN_SAMPLE_PIXELS:
            raise CalibrationError(
                f"dye {name!r}: sample has {len(pixels)} pixels, need >= {MIN_SAMPLE_PIXELS}"
            )
        mean_od = optical_density(pixels, white).mean(axis=0)
        norm = float(np.linalg.norm(mean_od))
        if norm < 1e-3:
            raise CalibrationError(f"dye {name!r}: indistinguishable from background")
        names.append(name)
        rows.append(mean_od / norm)

    for (i, a), (j, b) in itertools.combinations(enumerate(rows), 2):
        cos = float(np.clip(np.dot(a, b), -1.0, 1.0))
        angle = math.degrees(math.acos(cos))
        if angle < MIN_SEPARATION_DEG:
            raise CalibrationError(
                f"dyes {names[i]!r} and {names[j]!r} are only {angle:.2f} degrees apart"
            )
    return StainBasis(
        names=tuple(names),
        matrix=np.array(rows),
        white_point=tuple(float(v) for v in white),
    )


def _nnls_subsets(od: np.ndarray, matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact NNLS for k <= 3 dyes by best feasible support subset.

    od is (n, 3); returns (n, k) nonnegative concentrations and (n,)
    residual norms. The zero solution is always feasible, so every pixel
    gets an answer.
    """
    n, k = od.shape[0], matrix.shape[0]
    best_coeffs = np.zeros((n, k))
    best_resid = np.einsum("ij,ij->i", od, od)  # squared norm of the zero fit
    for size in range(1, k + 1):
        for subset in itertools.combinations(range(k), size):
            sub = matrix[list(subset)]  # (s, 3)
            gram_inv = np.linalg.inv(sub @ sub.T)
            coeffs = od @ sub.T @ gram_inv  # (n, s) unconstrained LS on this support
            feasible = np.all(coeffs >= -1e-12, axis=1)
            if not feasible.any():
                continue
            recon = coeffs @ sub
            resid = np.einsum("ij,ij->i", od - recon, od - recon)
            better = feasible & (resid < best_resid - 1e-15)
            if better.any():
                best_resid[better] = resid[better]
                best_coeffs[better] = 0.0
                for col, dye_index in enumerate(subset):
                    best_coeffs[better, dye_index] = coeffs[better, col]
    return np.maximum(best_coeffs, 0.0), np.sqrt(np.maximum(best_resid, 0.0))


def unmix(
    image: RasterImage,
    basis: StainBasis,
    roi: BinaryMask | None = None,
) -> ConcentrationMap:
    """Nonnegative dye concentrations per pixel, over the ROI or whole frame."""
    if image.channels != 3:
        raise ValueError("unmixing needs an RGB image")
    height, width = image.pixels.shape[:2]
    if roi is None:
        select = np.ones((height, width), dtype=bool)
    else:
        if roi.bits.shape != (height, width):
            raise ValueError("ROI shape does not match image")
        select = roi.bits
    maps = {name: np.zeros((height, width)) for name in basis.names}
    residual = np.zeros((height, width))
    if select.any():
        od = optical_density(image.pixels[select], basis.white_point)
        coeffs, resid = _nnls_subsets(od, basis.matrix)
        for col, name in enumerate(basis.names):
            maps[name][select] = coeffs[:, col]
        residual[select] = resid
    return ConcentrationMap(names=basis.names, maps=maps, residual=residual)


def dye_ratio(conc: ConcentrationMap, region: Region) -> tuple[dict[str, float], bool]:
    """Fraction of each dye's integrated concentration within a region.

    A region whose total concentration is below 1e-6 is flagged empty and
    reports all-zero fractions instead of amplified noise.
    """
    sums = {
        name: float(conc.maps[name][region.rows, region.cols].sum())
        for name in conc.names
    }
    total = sum(sums.values())
    if total < EMPTY_TOTAL:
        return {name: 0.0 for name in conc.names}, True
    return {name: value / total for name, value in sums.items()}, False
