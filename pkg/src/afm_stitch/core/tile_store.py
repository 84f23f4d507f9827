"""Tile stack storage.

This module handles loading multi-channel tile stacks from a JSON manifest
with raw float32 payloads, writing stacks back (used by the synthetic
generator and the image importer), and persisting stitched outputs:
mosaic payload + sidecar, 8-bit preview, layout and report.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import cv2
import numpy as np
from numpy.typing import NDArray
from pydantic import ValidationError

from afm_stitch.core.exceptions import InputError, OutputError
from afm_stitch.core.models import (
    RESERVED_CHANNEL,
    GridSidecar,
    LayoutReport,
    Manifest,
    ManifestTile,
    StitchReport,
)
from afm_stitch.core.preprocess import Grid

if TYPE_CHECKING:
    from afm_stitch.core.compose import Mosaic

logger = logging.getLogger(__name__)

ChannelId = str

PAYLOAD_DTYPE = np.dtype("<f4")
PREVIEW_INVALID_GRAY = 128
MIN_TILE_SIDE = 16


@dataclass(frozen=True)
class Tile:
    """One scan image with all of its channels.

    Attributes:
        index: Tile id; a stack holds indices 0 to n-1
        grids: Channel name -> grid; all grids share one shape
        pixel_size: Micrometers per pixel, if known
        origin_hint: Nominal (row, col) in the acquisition array, if known
    """

    index: int
    grids: dict[ChannelId, Grid]
    pixel_size: float | None = None
    origin_hint: tuple[float, float] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return next(iter(self.grids.values())).shape

    def with_grid(self, channel: ChannelId, grid: Grid) -> "Tile":
        """Return a copy of the tile with one channel added or replaced."""
        if grid.shape != self.shape:
            raise InputError(
                f"grid shape {grid.shape} does not match tile shape {self.shape}",
                tile_index=self.index,
                channel=channel,
            )
        return Tile(
            index=self.index,
            grids={**self.grids, channel: grid},
            pixel_size=self.pixel_size,
            origin_hint=self.origin_hint,
        )


@dataclass(frozen=True)
class TileStack:
    """The ordered tiles of one acquisition.

    Attributes:
        tiles: Tiles in index order
        channels: Measured channel names exposed by every tile
        meta: Free-form acquisition notes
    """

    tiles: list[Tile]
    channels: list[ChannelId]
    meta: dict[str, Any] = field(default_factory=dict)

    def grids(self, channel: ChannelId) -> list[Grid]:
        """Return one channel of every tile, in tile order."""
        out = []
        for tile in self.tiles:
            if channel not in tile.grids:
                raise InputError("channel missing", tile_index=tile.index, channel=channel)
            out.append(tile.grids[channel])
        return out

    def tile_dims(self) -> dict[int, tuple[int, int]]:
        return {tile.index: tile.shape for tile in self.tiles}


def _read_payload(path: Path, height: int, width: int, tile: int, channel: str) -> NDArray[np.float32]:
    if not path.is_file():
        raise InputError(f"payload file not found: {path}", tile_index=tile, channel=channel)
    raw = path.read_bytes()
    expected = height * width * PAYLOAD_DTYPE.itemsize
    if len(raw) != expected:
        raise InputError(
            f"payload has {len(raw)} bytes, expected {expected} for {height}x{width}",
            tile_index=tile,
            channel=channel,
        )
    return np.frombuffer(raw, dtype=PAYLOAD_DTYPE).reshape(height, width)


def _grid_from_payload(values: NDArray[np.float32], nodata: float | None) -> Grid:
    samples = values.astype(np.float64)
    valid = np.isfinite(samples)
    if nodata is not None:
        valid &= samples != nodata
    samples[~valid] = np.nan
    return Grid(samples=samples, valid=valid)


def read_manifest(manifest_path: Path) -> Manifest:
    """Read and validate a stack manifest.

    Raises:
        InputError: If the file is missing or does not validate
    """
    if not manifest_path.is_file():
        raise InputError(f"manifest not found: {manifest_path}")
    try:
        return Manifest.model_validate_json(manifest_path.read_text())
    except ValidationError as e:
        raise InputError(f"invalid manifest {manifest_path}: {e}") from e


def load_stack(manifest_path: Path, workers: int = 1) -> TileStack:
    """Load a tile stack described by a manifest.

    Tiles are ordered by ``index`` whatever their order in the manifest
    list; the indices must be unique and run from 0 to n-1. Payload
    samples that are NaN (or equal the manifest ``nodata`` sentinel) are
    marked invalid.

    Args:
        manifest_path: Path to the JSON manifest
        workers: Threads used to read payloads

    Returns:
        The loaded stack

    Raises:
        InputError: Missing file, dimension mismatch, missing channel,
            duplicate or non-contiguous indices, or fewer than 2 tiles
    """
    manifest = read_manifest(manifest_path)
    if len(manifest.tiles) < 2:
        raise InputError(f"fewer than 2 tiles in {manifest_path}")

    base = manifest_path.parent
    entries = sorted(manifest.tiles, key=lambda e: e.index)
    for position, entry in enumerate(entries):
        if entry.index != position:
            duplicate = position > 0 and entries[position - 1].index == entry.index
            problem = "is duplicated" if duplicate else f"leaves a gap at {position}"
            raise InputError(
                f"tile index {entry.index} {problem}; "
                f"indices must run from 0 to {len(entries) - 1}",
                tile_index=entry.index,
            )
        for channel in manifest.channels:
            if channel not in entry.payloads:
                raise InputError("channel missing for tile", tile_index=entry.index, channel=channel)

    def load_tile(entry: ManifestTile) -> Tile:
        grids = {}
        for channel in manifest.channels:
            values = _read_payload(
                base / entry.payloads[channel], entry.height, entry.width, entry.index, channel
            )
            grids[channel] = _grid_from_payload(values, manifest.nodata)
        return Tile(
            index=entry.index,
            grids=grids,
            pixel_size=entry.pixel_size,
            origin_hint=entry.origin_hint,
        )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        tiles = list(executor.map(load_tile, entries))

    logger.info(f"Loaded {len(tiles)} tiles x {len(manifest.channels)} channels from {manifest_path}")
    return TileStack(tiles=tiles, channels=list(manifest.channels), meta=dict(manifest.meta))


def _write_payload(path: Path, grid: Grid) -> None:
    values = grid.samples.astype(PAYLOAD_DTYPE)
    values[~grid.valid] = np.nan
    path.write_bytes(values.tobytes())


def save_stack(stack: TileStack, out_dir: Path) -> Path:
    """Write a stack as float32 payloads plus ``manifest.json``.

    Returns:
        Path to the written manifest
    """
    for tile in stack.tiles:
        for channel in stack.channels:
            if channel not in tile.grids:
                raise InputError("channel missing for tile", tile_index=tile.index, channel=channel)
            if channel == RESERVED_CHANNEL:
                raise InputError(f"'{RESERVED_CHANNEL}' is synthesized and never stored")

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for position, tile in enumerate(stack.tiles):
            payloads = {}
            for channel in stack.channels:
                name = f"tile_{position:03d}_{channel}.f32"
                _write_payload(out_dir / name, tile.grids[channel])
                payloads[channel] = name
            height, width = tile.shape
            entries.append(
                ManifestTile(
                    index=position,
                    height=height,
                    width=width,
                    pixel_size=tile.pixel_size,
                    origin_hint=tile.origin_hint,
                    payloads=payloads,
                )
            )
        manifest = Manifest(channels=list(stack.channels), tiles=entries, meta=stack.meta)
        manifest_path = out_dir / "manifest.json"
        manifest_path.write_text(manifest.model_dump_json(indent=2))
    except ValidationError as e:
        raise InputError(f"stack does not form a valid manifest: {e}") from e
    except OSError as e:
        raise OutputError(f"failed to write stack to {out_dir}: {e}") from e

    logger.info(f"Wrote {len(stack.tiles)} tiles to {manifest_path}")
    return manifest_path


def import_images(
    channel_files: dict[ChannelId, list[Path]],
    out_dir: Path,
    pixel_size: float | None = None,
    grid_cols: int | None = None,
) -> Path:
    """Convert exported 8/16-bit or float images into a native stack.

    Sample values are converted to float32 as stored, without rescaling.

    Args:
        channel_files: Channel name -> image files, one per tile, same order for every channel
        out_dir: Directory receiving payloads and manifest
        pixel_size: Micrometers per pixel recorded on every tile
        grid_cols: If given, origin hints are assigned row-major with this many columns

    Returns:
        Path to the written manifest
    """
    counts = {channel: len(files) for channel, files in channel_files.items()}
    if len(set(counts.values())) != 1:
        raise InputError(f"every channel needs the same number of images, got {counts}")

    n_tiles = next(iter(counts.values()))
    tiles = []
    for position in range(n_tiles):
        grids = {}
        for channel, files in channel_files.items():
            path = files[position]
            image = cv2.imread(str(path), cv2.IMREAD_ANYDEPTH | cv2.IMREAD_GRAYSCALE)
            if image is None:
                raise InputError(f"cannot read image {path}", tile_index=position, channel=channel)
            grids[channel] = Grid.from_array(image.astype(np.float32))
        shapes = {g.shape for g in grids.values()}
        if len(shapes) != 1:
            raise InputError(f"channel images differ in size: {sorted(shapes)}", tile_index=position)
        hint = None
        if grid_cols:
            hint = (float(position // grid_cols), float(position % grid_cols))
        tiles.append(Tile(index=position, grids=grids, pixel_size=pixel_size, origin_hint=hint))

    stack = TileStack(tiles=tiles, channels=list(channel_files), meta={"source": "image import"})
    return save_stack(stack, out_dir)


@dataclass(frozen=True)
class PlacedGrid:
    """A stitched grid with its position in the reference tile frame.

    Attributes:
        grid: Samples and validity
        extent: (min_x, min_y, width, height) of the grid
        reference_tile: Tile whose frame ``extent`` is in, if recorded
    """

    grid: Grid
    extent: tuple[int, int, int, int]
    reference_tile: int | None = None


def load_mosaic(sidecar_path: Path) -> PlacedGrid:
    """Load a stitched grid written by ``save_outputs`` together with its placement."""
    if not sidecar_path.is_file():
        raise InputError(f"grid sidecar not found: {sidecar_path}")
    try:
        sidecar = GridSidecar.model_validate_json(sidecar_path.read_text())
    except ValidationError as e:
        raise InputError(f"invalid grid sidecar {sidecar_path}: {e}") from e
    values = _read_payload(
        sidecar_path.parent / sidecar.payload, sidecar.height, sidecar.width, 0, sidecar.channel
    )
    return PlacedGrid(
        grid=_grid_from_payload(values, None),
        extent=sidecar.extent,
        reference_tile=sidecar.reference_tile,
    )


def load_grid(sidecar_path: Path) -> Grid:
    """Load only the samples of a stitched grid."""
    return load_mosaic(sidecar_path).grid


def render_preview(grid: Grid) -> NDArray[np.uint8]:
    """Min-max scale valid pixels to 8 bits around the invalid gray.

    Valid pixels use every level except ``PREVIEW_INVALID_GRAY``, so the
    minimum maps to 0, the maximum to 255 and gray 128 appears exactly where
    the grid is invalid.
    """
    preview = np.full(grid.shape, PREVIEW_INVALID_GRAY, dtype=np.uint8)
    values = grid.valid_values()
    if values.size == 0:
        return preview
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo if hi > lo else 1.0
    levels = np.rint((values - lo) / span * 254.0)
    levels += levels >= PREVIEW_INVALID_GRAY
    preview[grid.valid] = levels.astype(np.uint8)
    return preview


def layout_document(layout: LayoutReport) -> str:
    return layout.model_dump_json(indent=2)


def save_outputs(mosaic: "Mosaic", report: StitchReport, out_dir: Path) -> dict[str, Path]:
    """Persist a stitched mosaic and its report.

    Writes ``mosaic.f32`` + ``mosaic.json`` (float32 payload and sidecar),
    ``preview.png`` (8-bit, gray 128 exactly on invalid pixels), ``layout.json`` and
    ``report.json``.

    Returns:
        Mapping of artifact name to written path

    Raises:
        OutputError: If the mosaic has no valid pixel or writing fails
    """
    grid = mosaic.grid
    if not grid.valid.any():
        raise OutputError("mosaic has zero valid pixels; nothing written")

    paths = {
        "payload": out_dir / "mosaic.f32",
        "sidecar": out_dir / "mosaic.json",
        "preview": out_dir / "preview.png",
        "layout": out_dir / "layout.json",
        "report": out_dir / "report.json",
    }
    sidecar = GridSidecar(
        channel=mosaic.channel,
        height=grid.height,
        width=grid.width,
        payload=paths["payload"].name,
        extent=mosaic.extent.as_tuple(),
        pixel_size=mosaic.pixel_size,
        reference_tile=mosaic.layout.reference,
    )

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_payload(paths["payload"], grid)
        paths["sidecar"].write_text(sidecar.model_dump_json(indent=2))
        if not cv2.imwrite(str(paths["preview"]), render_preview(grid)):
            raise OutputError(f"failed to encode preview {paths['preview']}")
        paths["layout"].write_text(layout_document(report.layout))
        paths["report"].write_text(json.dumps(report.model_dump(mode="json"), indent=2) + "\n")
    except OSError as e:
        raise OutputError(f"failed to write outputs to {out_dir}: {e}") from e

    logger.info(f"Wrote mosaic {grid.width}x{grid.height} and report to {out_dir}")
    return paths
