"""Scan-artifact removal and channel synthesis for AFM tiles.

Line flattening and plane removal correct the topography artifacts typical of
AFM rasters (per-line offsets, sample tilt). ``derive_x`` synthesizes the
fast-scan derivative channel and ``normalize_u8`` quantizes a grid for the
feature detector.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from afm_stitch.core.exceptions import DegenerateGeometryError, InputError

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
BoolArray = NDArray[np.bool_]


@dataclass(frozen=True)
class Grid:
    """A 2D field of real samples with an explicit validity mask.

    Invalid samples are stored as NaN in ``samples``; ``valid`` is the source
    of truth and is always consistent with the NaN positions.

    Attributes:
        samples: float64 array (height x width)
        valid: boolean array of the same shape
    """

    samples: FloatArray
    valid: BoolArray

    def __post_init__(self) -> None:
        if self.samples.ndim != 2 or self.samples.size == 0:
            raise InputError(f"grid must be a non-empty 2D array, got shape {self.samples.shape}")
        if self.valid.shape != self.samples.shape:
            raise InputError(
                f"mask shape {self.valid.shape} does not match samples {self.samples.shape}"
            )

    @classmethod
    def from_array(cls, values: NDArray[np.floating] | NDArray[np.integer]) -> "Grid":
        """Build a grid from raw values, marking non-finite samples invalid."""
        samples = np.array(values, dtype=np.float64)
        valid = np.isfinite(samples)
        samples[~valid] = np.nan
        return cls(samples=samples, valid=valid)

    @classmethod
    def masked(cls, values: FloatArray, valid: BoolArray) -> "Grid":
        """Build a grid from values and a mask; masked-out samples become NaN."""
        samples = np.array(values, dtype=np.float64)
        mask = np.asarray(valid, dtype=bool) & np.isfinite(samples)
        samples[~mask] = np.nan
        return cls(samples=samples, valid=mask)

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.samples.shape[0]), int(self.samples.shape[1]))

    @property
    def height(self) -> int:
        return self.shape[0]

    @property
    def width(self) -> int:
        return self.shape[1]

    def valid_values(self) -> FloatArray:
        return self.samples[self.valid]


class FlattenMethod(str, Enum):
    """Artifact correction kinds."""

    LINE_MEAN = "line_mean"
    LINE_MEDIAN = "line_median"
    PLANE = "plane"


def flatten_lines(g: Grid, method: FlattenMethod = FlattenMethod.LINE_MEDIAN) -> Grid:
    """Remove per-scan-line offsets.

    Every row with at least one valid pixel is shifted by a constant so its
    valid mean (or median) equals a common target. For ``line_mean`` the
    target is the global valid mean; for ``line_median`` it is the median of
    the row medians, which keeps the operation idempotent. Rows without valid
    pixels pass through unchanged.

    Args:
        g: Input grid
        method: ``line_mean`` or ``line_median``

    Returns:
        Flattened grid with the same mask
    """
    if method not in (FlattenMethod.LINE_MEAN, FlattenMethod.LINE_MEDIAN):
        raise InputError(f"flatten_lines does not support method '{method.value}'")

    rows = np.flatnonzero(g.valid.any(axis=1))
    if rows.size == 0:
        return g

    # NaN marks invalid samples, so the nan-aware reductions see valid pixels only
    block = g.samples[rows]
    if method is FlattenMethod.LINE_MEAN:
        stats = np.nanmean(block, axis=1)
        target = float(np.mean(g.valid_values()))
    else:
        stats = np.nanmedian(block, axis=1)
        target = float(np.median(stats))

    out = g.samples.copy()
    out[rows] += (target - stats)[:, None]
    return Grid(samples=out, valid=g.valid.copy())


def remove_plane(g: Grid) -> Grid:
    """Subtract the least-squares plane ``a*x + b*y + c`` fitted over valid pixels.

    Raises:
        DegenerateGeometryError: If the valid pixels are collinear
    """
    ys, xs = np.nonzero(g.valid)
    design = np.column_stack([xs.astype(np.float64), ys.astype(np.float64), np.ones(xs.size)])
    if xs.size < 3 or np.linalg.matrix_rank(design) < 3:
        raise DegenerateGeometryError(
            "plane fit needs at least 3 non-collinear valid pixels"
        )

    z = g.samples[ys, xs]
    # Fit around the centroid so the intercept does not absorb roundoff
    x0, y0 = xs.mean(), ys.mean()
    design[:, 0] -= x0
    design[:, 1] -= y0
    (a, b, c), *_ = np.linalg.lstsq(design, z, rcond=None)

    yy, xx = np.mgrid[0 : g.height, 0 : g.width]
    plane = a * (xx - x0) + b * (yy - y0) + c
    out = g.samples - plane
    out[~g.valid] = np.nan
    # Remove the roundoff left in the residual mean
    out[g.valid] -= out[g.valid].mean()
    return Grid(samples=out, valid=g.valid.copy())


def derive_x(g: Grid, smooth_sigma: float = 0.0) -> Grid:
    """Differentiate along the fast-scan (x) axis.

    Interior columns use the central difference ``(g[c+1] - g[c-1]) / 2``;
    the first and last columns use forward and backward differences. An
    output pixel is valid only if every sample of its stencil is valid.

    Args:
        g: Input grid, at least 2 columns wide
        smooth_sigma: Optional Gaussian pre-smoothing (0 disables it)

    Returns:
        Derivative grid of identical shape
    """
    if g.width < 2:
        raise InputError(f"derive_x needs width >= 2, got {g.width}")

    samples = g.samples
    if smooth_sigma > 0:
        filled = np.where(g.valid, samples, 0.0)
        samples = ndimage.gaussian_filter(filled, smooth_sigma)

    out = np.empty_like(samples)
    valid = np.zeros_like(g.valid)
    if g.width > 2:
        out[:, 1:-1] = (samples[:, 2:] - samples[:, :-2]) / 2
        valid[:, 1:-1] = g.valid[:, 2:] & g.valid[:, :-2]
    out[:, 0] = samples[:, 1] - samples[:, 0]
    valid[:, 0] = g.valid[:, 1] & g.valid[:, 0]
    out[:, -1] = samples[:, -1] - samples[:, -2]
    valid[:, -1] = g.valid[:, -1] & g.valid[:, -2]
    out[~valid] = np.nan
    return Grid(samples=out, valid=valid)


def normalize_u8(g: Grid, p_low: float = 0.5, p_high: float = 99.5) -> NDArray[np.uint8]:
    """Quantize a grid to bytes for feature detection.

    The ``[p_low, p_high]`` percentile range of the valid samples is mapped
    linearly onto ``[0, 255]`` with clamping. A zero range maps every valid
    pixel to 128. Invalid pixels become 0.

    Raises:
        InputError: If no pixel is valid
    """
    values = g.valid_values()
    if values.size == 0:
        raise InputError("cannot normalize a grid without valid pixels")

    lo, hi = np.percentile(values, [p_low, p_high])
    out = np.zeros(g.shape, dtype=np.uint8)
    if hi - lo <= 1e-12 * max(1.0, abs(lo), abs(hi)):
        out[g.valid] = 128
        return out

    scaled = (values - lo) / (hi - lo) * 255.0
    out[g.valid] = np.rint(np.clip(scaled, 0.0, 255.0)).astype(np.uint8)
    return out


def preprocess_primary(
    g: Grid,
    flatten: bool = True,
    method: FlattenMethod = FlattenMethod.LINE_MEDIAN,
    plane: bool = True,
) -> Grid:
    """Apply the default topography correction chain (line flatten, then plane)."""
    if flatten:
        g = flatten_lines(g, method)
    if plane:
        g = remove_plane(g)
    return g
