"""Synthetic multi-channel tile stacks with known ground truth.

A master surface of rod-shaped cells on a textured substrate is cut into an
overlapping grid of tiles under jittered poses. The topography tile sees a
sparsified, blurred version of the master on top of a broad bowl, with a
random tilt and per-line offsets; the amplitude tile is the fast-scan
derivative of the full master. ``primary_sparsity`` dials how feature-poor
the topography is compared to the amplitude.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy import ndimage

from afm_stitch.core.exceptions import ConfigurationError, InputError, OutputError
from afm_stitch.core.matching import AffineTransform
from afm_stitch.core.models import PoseRecord, TruthFile
from afm_stitch.core.preprocess import Grid, derive_x
from afm_stitch.core.tile_store import Tile, TileStack

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

PRIMARY_CHANNEL = "topo"
SECONDARY_CHANNEL = "amplitude"

CELL_HEIGHT = (40.0, 80.0)
CELL_SIGMA_LONG = (6.0, 10.0)
CELL_SIGMA_SHORT = (2.0, 3.0)
TEXTURE_SIGMA = 2.0
MAX_PRIMARY_BLUR = 2.0
MIN_ADJACENT_OVERLAP = 0.5


class SynthSpec(BaseModel):
    """Recipe of a synthetic acquisition."""

    model_config = ConfigDict(extra="forbid")

    rows: int = Field(3, ge=1, le=16)
    cols: int = Field(3, ge=1, le=16)
    tile_size: int = Field(512, ge=32, le=4096)
    overlap_frac: float = Field(0.10, gt=0.0, lt=0.5)
    max_translation_jitter: float = Field(5.0, ge=0.0, description="Pixels")
    max_rotation_jitter: float = Field(math.radians(1.0), ge=0.0, le=0.2, description="Radians")
    primary_sparsity: float = Field(0.9, ge=0.0, le=1.0)
    line_noise_amp: float = Field(2.0, ge=0.0)
    cell_density: float = Field(24.0, ge=0.0, description="Cells per tile area")
    texture_amplitude: float = Field(3.0, ge=0.0)
    bowl_height: float = Field(400.0, ge=0.0, description="Bowl rise over one tile size")
    max_tilt: float = Field(0.004, ge=0.0, description="Per-tile plane slope per pixel")
    seed: int = Field(7, ge=0)

    @property
    def spacing(self) -> int:
        """Nominal distance between neighbouring tile origins."""
        return int(round(self.tile_size * (1.0 - self.overlap_frac)))

    @property
    def margin(self) -> int:
        corner_shift = self.tile_size * math.sin(self.max_rotation_jitter) / math.sqrt(2.0)
        return int(math.ceil(self.max_translation_jitter + corner_shift)) + 2

    @property
    def master_shape(self) -> tuple[int, int]:
        span_x = self.spacing * (self.cols - 1) + self.tile_size
        span_y = self.spacing * (self.rows - 1) + self.tile_size
        return (span_y + 2 * self.margin, span_x + 2 * self.margin)


@dataclass(frozen=True)
class GroundTruth:
    """True tile poses into master coordinates and the overlapping pairs."""

    true_poses: dict[int, AffineTransform]
    adjacency: list[tuple[int, int]]
    tile_size: int
    master: Grid | None = None

    def to_model(self) -> TruthFile:
        return TruthFile(
            tile_size=self.tile_size,
            poses=[
                PoseRecord(tile=t, coefficients=self.true_poses[t].coefficients)
                for t in sorted(self.true_poses)
            ],
            adjacency=self.adjacency,
        )


def build_spec(**fields: object) -> SynthSpec:
    """Validate synth settings, raising ConfigurationError on violations."""
    try:
        return SynthSpec.model_validate(fields)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid synth settings: {e}") from e


def blob_master(width: int, height: int, blob_count: int, seed: int) -> Grid:
    """Rod-like anisotropic Gaussian cells on a zero background.

    Heights are drawn from 40-80, long and short widths from 6-10 and 2-3
    pixels, orientations uniformly.
    """
    if blob_count < 0:
        raise ConfigurationError(f"blob_count must be >= 0, got {blob_count}")
    rng = np.random.default_rng(seed)
    out = np.zeros((height, width))
    for _ in range(blob_count):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        phi = rng.uniform(0, np.pi)
        amp = rng.uniform(*CELL_HEIGHT)
        s_long = rng.uniform(*CELL_SIGMA_LONG)
        s_short = rng.uniform(*CELL_SIGMA_SHORT)

        reach = int(math.ceil(3.5 * s_long))
        x0, x1 = max(0, int(cx) - reach), min(width, int(cx) + reach + 1)
        y0, y1 = max(0, int(cy) - reach), min(height, int(cy) + reach + 1)
        if x1 <= x0 or y1 <= y0:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dx, dy = xx - cx, yy - cy
        along = dx * np.cos(phi) + dy * np.sin(phi)
        across = -dx * np.sin(phi) + dy * np.cos(phi)
        out[y0:y1, x0:x1] += amp * np.exp(
            -(along**2) / (2 * s_long**2) - (across**2) / (2 * s_short**2)
        )
    return Grid.from_array(out)


def substrate_texture(width: int, height: int, amplitude: float, seed: int) -> FloatArray:
    """Smoothed white noise scaled to the given standard deviation."""
    rng = np.random.default_rng(seed)
    field = ndimage.gaussian_filter(rng.standard_normal((height, width)), TEXTURE_SIGMA)
    std = float(field.std())
    return field * (amplitude / std) if std > 0 else field


def _bowl(shape: tuple[int, int], height: float, tile_size: int) -> FloatArray:
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    cy, cx = (shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0
    return height * ((xx - cx) ** 2 + (yy - cy) ** 2) / float(tile_size) ** 2


def _tile_pose(origin: tuple[float, float], size: int, angle: float) -> AffineTransform:
    c = (size - 1) / 2.0
    rot = AffineTransform(math.cos(angle), -math.sin(angle), 0.0, math.sin(angle), math.cos(angle), 0.0)
    return (
        AffineTransform.translation(origin[0] + c, origin[1] + c)
        .compose(rot)
        .compose(AffineTransform.translation(-c, -c))
    )


def _sample(surface: FloatArray, pose: AffineTransform, size: int) -> FloatArray:
    vv, uu = np.mgrid[0:size, 0:size].astype(np.float64)
    pts = pose.apply(np.column_stack([uu.ravel(), vv.ravel()]))
    coords = np.vstack([pts[:, 1], pts[:, 0]])
    return ndimage.map_coordinates(surface, coords, order=1, mode="nearest").reshape(size, size)


def _footprint(pose: AffineTransform, size: int) -> NDArray[np.float32]:
    corners = np.array([[0.0, 0.0], [size, 0.0], [size, size], [0.0, size]])
    return pose.apply(corners).astype(np.float32)


def true_adjacency(poses: dict[int, AffineTransform], spec: SynthSpec) -> list[tuple[int, int]]:
    """Pairs whose footprints share at least half of the nominal edge overlap."""
    needed = MIN_ADJACENT_OVERLAP * spec.overlap_frac * spec.tile_size**2
    shapes = {t: _footprint(p, spec.tile_size) for t, p in poses.items()}
    pairs = []
    tiles = sorted(poses)
    for i, a in enumerate(tiles):
        for b in tiles[i + 1 :]:
            area, _ = cv2.intersectConvexConvex(shapes[a], shapes[b])
            if area >= needed:
                pairs.append((a, b))
    return pairs


def generate(spec: SynthSpec, master: Grid | None = None) -> tuple[TileStack, GroundTruth]:
    """Cut a jittered tile grid out of a master surface.

    Args:
        spec: Acquisition recipe
        master: Optional master surface; a cell field is generated when omitted

    Returns:
        (stack with ``topo`` and ``amplitude`` channels, ground truth)

    Raises:
        ConfigurationError: If a given master is smaller than the grid needs
    """
    height, width = spec.master_shape
    seeds = np.random.SeedSequence(spec.seed).spawn(3 + spec.rows * spec.cols)

    if master is None:
        blob_count = int(round(spec.cell_density * height * width / spec.tile_size**2))
        cells = blob_master(width, height, blob_count, int(seeds[0].generate_state(1)[0]))
        texture = substrate_texture(width, height, spec.texture_amplitude, int(seeds[1].generate_state(1)[0]))
        full = cells.samples + texture
        # Cells kept in the topography with probability 1 - sparsity
        keep_rng = np.random.default_rng(seeds[2])
        kept = blob_master(
            width,
            height,
            int(keep_rng.binomial(blob_count, 1.0 - spec.primary_sparsity)),
            int(seeds[0].generate_state(1)[0]),
        )
        detail = kept.samples + texture
    else:
        if master.height < height or master.width < width or not master.valid.all():
            raise ConfigurationError(
                f"master must be a fully valid grid of at least {width}x{height}, "
                f"got {master.width}x{master.height}"
            )
        full = master.samples
        detail = master.samples

    sparsity = spec.primary_sparsity
    if sparsity > 0:
        detail = ndimage.gaussian_filter(detail, MAX_PRIMARY_BLUR * sparsity)
    topo_surface = (1.0 - sparsity) * detail + sparsity * _bowl(full.shape, spec.bowl_height, spec.tile_size)

    size = spec.tile_size
    tiles: list[Tile] = []
    poses: dict[int, AffineTransform] = {}
    for r in range(spec.rows):
        for c in range(spec.cols):
            index = r * spec.cols + c
            rng = np.random.default_rng(seeds[3 + index])
            jitter = rng.uniform(-spec.max_translation_jitter, spec.max_translation_jitter, 2)
            angle = float(rng.uniform(-spec.max_rotation_jitter, spec.max_rotation_jitter))
            origin = (spec.margin + c * spec.spacing + jitter[0], spec.margin + r * spec.spacing + jitter[1])
            pose = _tile_pose(origin, size, angle)
            poses[index] = pose

            topo = _sample(topo_surface, pose, size)
            slope = rng.uniform(-spec.max_tilt, spec.max_tilt, 2)
            vv, uu = np.mgrid[0:size, 0:size]
            topo = topo + slope[0] * uu + slope[1] * vv
            topo = topo + rng.uniform(-spec.line_noise_amp, spec.line_noise_amp, size)[:, None]
            amplitude = derive_x(Grid.from_array(_sample(full, pose, size)))

            tiles.append(
                Tile(
                    index=index,
                    grids={PRIMARY_CHANNEL: Grid.from_array(topo), SECONDARY_CHANNEL: amplitude},
                    origin_hint=(float(r), float(c)),
                )
            )

    stack = TileStack(
        tiles=tiles,
        channels=[PRIMARY_CHANNEL, SECONDARY_CHANNEL],
        meta={"generator": "afm-stitch synth", "spec": spec.model_dump()},
    )
    truth = GroundTruth(
        true_poses=poses,
        adjacency=true_adjacency(poses, spec),
        tile_size=size,
        master=Grid.from_array(full),
    )
    logger.info(
        f"Generated {spec.rows}x{spec.cols} tiles of {size}px from a "
        f"{width}x{height} master, {len(truth.adjacency)} adjacent pairs"
    )
    return stack, truth


def save_truth(truth: GroundTruth, path: Path) -> None:
    try:
        path.write_text(truth.to_model().model_dump_json(indent=2))
    except OSError as e:
        raise OutputError(f"failed to write ground truth {path}: {e}") from e


def load_truth(path: Path) -> GroundTruth:
    """Read a ground-truth file written by ``save_truth``."""
    if not path.is_file():
        raise InputError(f"ground truth file not found: {path}")
    try:
        model = TruthFile.model_validate_json(path.read_text())
    except ValidationError as e:
        raise InputError(f"invalid ground truth file {path}: {e}") from e
    return GroundTruth(
        true_poses={p.tile: AffineTransform.from_coefficients(p.coefficients) for p in model.poses},
        adjacency=[tuple(pair) for pair in model.adjacency],  # type: ignore[misc]
        tile_size=model.tile_size,
    )
