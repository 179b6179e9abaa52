"""Droplet microfluidics image analysis toolkit.

Core raster/region types live in dropcyte.core; the analysis modules are
dropcyte.brightfield (droplet segmentation), dropcyte.stainsep (dye
unmixing), dropcyte.registration (drift + exposure), dropcyte.fluor (cell
morphometrics and viability), dropcyte.synth (oracle renderer), and
dropcyte.pipeline / dropcyte.cli (orchestration).
"""

from dropcyte.core import (
    BinaryMask,
    RasterImage,
    Region,
    circularity,
    label_components,
    trace_contour,
)

__all__ = [
    "BinaryMask",
    "RasterImage",
    "Region",
    "circularity",
    "label_components",
    "trace_contour",
]

__version__ = "0.1.0"
