"""Warping and blending of primary-channel tiles into the mosaic.

Tiles are resampled by inverse mapping with bilinear interpolation over
valid source pixels only, weighted by a linear feather ramp, optionally
shifted to a common height baseline and then blended.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from numpy.typing import NDArray

from afm_stitch.config import BlendMode, BlendSpec
from afm_stitch.core.matching import AffineTransform
from afm_stitch.core.pose_graph import Layout
from afm_stitch.core.preprocess import Grid

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

FOOTPRINT_EPS = 1e-6
LATTICE_SNAP = 1e-9
MIN_OFFSET_OVERLAP = 16


@dataclass(frozen=True)
class Extent:
    """Integer mosaic bounding box in reference-tile pixel coordinates."""

    min_x: int
    min_y: int
    width: int
    height: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.min_x, self.min_y, self.width, self.height)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class WarpedTile:
    """A tile resampled into a window of the mosaic.

    ``values`` and ``weight`` cover rows ``row0:row0+h`` and columns
    ``col0:col0+w`` of the extent; ``weight`` is 0 outside the footprint and
    wherever interpolation touched an invalid source pixel.
    """

    tile_index: int
    values: FloatArray
    weight: FloatArray
    row0: int
    col0: int

    @property
    def window(self) -> tuple[slice, slice]:
        h, w = self.values.shape
        return slice(self.row0, self.row0 + h), slice(self.col0, self.col0 + w)

    def full(self, extent: Extent) -> tuple[Grid, FloatArray]:
        """Expand to full-extent (warped grid, weight grid)."""
        values = np.full(extent.shape, np.nan)
        weight = np.zeros(extent.shape)
        values[self.window] = self.values
        weight[self.window] = self.weight
        return Grid.masked(values, weight > 0), weight

    def shifted(self, offset: float) -> "WarpedTile":
        return WarpedTile(self.tile_index, self.values - offset, self.weight, self.row0, self.col0)


@dataclass(frozen=True)
class Mosaic:
    """The stitched primary channel.

    Attributes:
        grid: Blended samples, valid exactly where ``weight > 0``
        weight: Accumulated blend weight per pixel
        layout: Poses the tiles were warped with
        extent: Mosaic bounding box
        channel: Name of the stitched channel
        pixel_size: Micrometers per pixel, if known
        offsets: Height baseline removed from each tile
    """

    grid: Grid
    weight: FloatArray
    layout: Layout
    extent: Extent
    channel: str
    pixel_size: float | None = None
    offsets: dict[int, float] | None = None


def _corners(height: int, width: int) -> FloatArray:
    return np.array([[0.0, 0.0], [width, 0.0], [0.0, height], [width, height]])


def canvas_extent(
    poses: Layout | dict[int, AffineTransform], tile_dims: dict[int, tuple[int, int]]
) -> Extent:
    """Tight integer bounding box of every member tile's warped corners."""
    pose_map = poses.as_dict() if isinstance(poses, Layout) else poses
    if not pose_map:
        raise ValueError("layout is empty")
    pts = np.vstack([pose_map[t].apply(_corners(*tile_dims[t])) for t in sorted(pose_map)])
    lo = np.floor(pts.min(axis=0) + LATTICE_SNAP).astype(int)
    hi = np.ceil(pts.max(axis=0) - LATTICE_SNAP).astype(int)
    return Extent(int(lo[0]), int(lo[1]), int(hi[0] - lo[0]), int(hi[1] - lo[1]))


def _snap(u: FloatArray) -> FloatArray:
    r = np.rint(u)
    return np.where(np.abs(u - r) < LATTICE_SNAP, r, u)


def _feather(u: FloatArray, length: int, margin: float | None) -> FloatArray:
    ramp = margin if margin is not None else length / 2.0
    return np.minimum(1.0, np.minimum(u + 1.0, length - u) / ramp)


def warp_tile(
    tile_grid: Grid,
    pose: AffineTransform,
    extent: Extent,
    blend: BlendSpec | None = None,
    tile_index: int = 0,
) -> WarpedTile:
    """Resample one tile into the mosaic frame.

    Each mosaic pixel inside the footprint samples the tile at
    ``pose^-1(pixel)`` bilinearly; it is valid only if every source pixel
    with a nonzero interpolation weight is valid.

    Raises:
        DegenerateGeometryError: If the pose is singular
    """
    blend = blend or BlendSpec()
    inv = pose.inverse()
    h, w = tile_grid.shape

    box = pose.apply(np.array([[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]]))
    c0 = max(0, int(np.ceil(box[:, 0].min() - extent.min_x - FOOTPRINT_EPS)))
    c1 = min(extent.width - 1, int(np.floor(box[:, 0].max() - extent.min_x + FOOTPRINT_EPS)))
    r0 = max(0, int(np.ceil(box[:, 1].min() - extent.min_y - FOOTPRINT_EPS)))
    r1 = min(extent.height - 1, int(np.floor(box[:, 1].max() - extent.min_y + FOOTPRINT_EPS)))
    if c1 < c0 or r1 < r0:
        empty = np.zeros((0, 0))
        return WarpedTile(tile_index, empty, empty, 0, 0)

    rows, cols = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    src = inv.apply(
        np.column_stack([(cols + extent.min_x).ravel(), (rows + extent.min_y).ravel()])
    )
    u = _snap(src[:, 0]).reshape(rows.shape)
    v = _snap(src[:, 1]).reshape(rows.shape)
    inside = (u >= -FOOTPRINT_EPS) & (u <= w - 1 + FOOTPRINT_EPS)
    inside &= (v >= -FOOTPRINT_EPS) & (v <= h - 1 + FOOTPRINT_EPS)
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)

    u0 = np.clip(np.floor(u).astype(np.intp), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.intp), 0, max(h - 2, 0))
    fu = u - u0
    fv = v - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)

    filled = np.where(tile_grid.valid, tile_grid.samples, 0.0)
    ok = tile_grid.valid
    values = np.zeros(rows.shape)
    valid = inside.copy()
    for yy, xx, wt in (
        (v0, u0, (1 - fv) * (1 - fu)),
        (v0, u1, (1 - fv) * fu),
        (v1, u0, fv * (1 - fu)),
        (v1, u1, fv * fu),
    ):
        values += wt * filled[yy, xx]
        valid &= (wt == 0) | ok[yy, xx]

    weight = _feather(u, w, blend.feather_margin) * _feather(v, h, blend.feather_margin)
    weight = np.where(valid, weight, 0.0)
    values = np.where(valid, values, np.nan)
    return WarpedTile(tile_index, values, weight, r0, c0)


def warp_all(
    grids: dict[int, Grid],
    layout: Layout,
    extent: Extent,
    blend: BlendSpec,
    workers: int = 1,
) -> list[WarpedTile]:
    """Warp every member tile; output is in tile index order."""
    poses = layout.as_dict()
    tiles = sorted(poses)

    def run(t: int) -> WarpedTile:
        return warp_tile(grids[t], poses[t], extent, blend, tile_index=t)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        return list(executor.map(run, tiles))


def _overlap_difference(a: WarpedTile, b: WarpedTile) -> tuple[float, int] | None:
    ra, ca = a.window
    rb, cb = b.window
    r0, r1 = max(ra.start, rb.start), min(ra.stop, rb.stop)
    c0, c1 = max(ca.start, cb.start), min(ca.stop, cb.stop)
    if r1 <= r0 or c1 <= c0:
        return None
    wa = a.weight[r0 - a.row0 : r1 - a.row0, c0 - a.col0 : c1 - a.col0]
    wb = b.weight[r0 - b.row0 : r1 - b.row0, c0 - b.col0 : c1 - b.col0]
    joint = (wa > 0) & (wb > 0)
    count = int(joint.sum())
    if count < MIN_OFFSET_OVERLAP:
        return None
    va = a.values[r0 - a.row0 : r1 - a.row0, c0 - a.col0 : c1 - a.col0]
    vb = b.values[r0 - b.row0 : r1 - b.row0, c0 - b.col0 : c1 - b.col0]
    return float(np.mean(va[joint] - vb[joint])), count


def reconcile_offsets(warpeds: list[WarpedTile], reference: int) -> dict[int, float]:
    """Per-tile height baselines from pairwise overlap mean differences.

    Solves ``o_i - o_j = mean(v_i - v_j)`` over all overlapping pairs in the
    least-squares sense with the reference tile's offset fixed at 0.
    """
    index = {wt.tile_index: k for k, wt in enumerate(warpeds)}
    links = []
    for a, b in combinations(warpeds, 2):
        diff = _overlap_difference(a, b)
        if diff is not None:
            links.append((index[a.tile_index], index[b.tile_index], diff[0]))

    n = len(warpeds)
    design = np.zeros((len(links) + 1, n))
    rhs = np.zeros(len(links) + 1)
    for row, (i, j, d) in enumerate(links):
        design[row, i] = 1.0
        design[row, j] = -1.0
        rhs[row] = d
    if reference in index:
        design[-1, index[reference]] = 1.0
    sol, *_ = np.linalg.lstsq(design, rhs, rcond=None)
    if reference in index:
        sol = sol - sol[index[reference]]
    logger.debug(f"Offsets from {len(links)} overlaps: {np.round(sol, 4).tolist()}")
    return {wt.tile_index: float(sol[k]) for k, wt in enumerate(warpeds)}


def blend(
    warpeds: list[WarpedTile],
    extent: Extent,
    mode: BlendMode = BlendMode.FEATHER,
) -> tuple[Grid, FloatArray]:
    """Combine warped tiles.

    ``feather`` takes the weighted mean of contributors; ``nearest`` takes
    the contributor with the largest weight, ties going to the lower tile
    index. Pixels without contributors are invalid.

    Returns:
        (blended grid, accumulated weight)
    """
    total = np.zeros(extent.shape)
    acc = np.zeros(extent.shape)
    best = np.zeros(extent.shape)
    for wt in sorted(warpeds, key=lambda x: x.tile_index):
        if wt.values.size == 0:
            continue
        win = wt.window
        contrib = wt.weight > 0
        vals = np.where(contrib, wt.values, 0.0)
        total[win] += wt.weight
        if mode is BlendMode.FEATHER:
            acc[win] += wt.weight * vals
        else:
            better = wt.weight > best[win]
            acc[win] = np.where(better, vals, acc[win])
            best[win] = np.where(better, wt.weight, best[win])

    valid = total > 0
    if mode is BlendMode.FEATHER:
        out = np.divide(acc, total, out=np.full(extent.shape, np.nan), where=valid)
    else:
        out = np.where(valid, acc, np.nan)
    return Grid.masked(out, valid), total


def compose_mosaic(
    grids: dict[int, Grid],
    layout: Layout,
    spec: BlendSpec,
    channel: str,
    pixel_size: float | None = None,
    workers: int = 1,
) -> Mosaic:
    """Warp, reconcile and blend the member tiles of a layout."""
    dims = {t: grids[t].shape for t in layout.member_tiles}
    extent = canvas_extent(layout, dims)
    warpeds = warp_all(grids, layout, extent, spec, workers)
    offsets = None
    if spec.offset_reconcile and len(warpeds) > 1:
        offsets = reconcile_offsets(warpeds, layout.reference)
        warpeds = [wt.shifted(offsets[wt.tile_index]) for wt in warpeds]
    grid, weight = blend(warpeds, extent, spec.mode)
    logger.info(
        f"Composed {len(warpeds)} tiles into {extent.width}x{extent.height} mosaic "
        f"({spec.mode.value})"
    )
    return Mosaic(
        grid=grid,
        weight=weight,
        layout=layout,
        extent=extent,
        channel=channel,
        pixel_size=pixel_size,
        offsets=offsets,
    )
