"""Pytest configuration and fixtures for afm-stitch tests.

This module provides common fixtures: textured surfaces, small hand-built
stacks written to disk and synthetic acquisitions with ground truth.
"""

import logging
import math
from pathlib import Path

import numpy as np
import pytest

from afm_stitch.core.preprocess import Grid
from afm_stitch.core.synth import (
    PRIMARY_CHANNEL,
    SECONDARY_CHANNEL,
    blob_master,
    build_spec,
    generate,
    save_truth,
    substrate_texture,
)
from afm_stitch.core.tile_store import Tile, TileStack, save_stack


@pytest.fixture(autouse=True)
def reset_logging():
    """Drop handlers installed by the CLI callback so tests stay isolated."""
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    root.setLevel(logging.WARNING)


@pytest.fixture(scope="session")
def textured_surface() -> np.ndarray:
    """A 300x400 surface of cells on smoothed noise."""
    cells = blob_master(400, 300, 60, seed=3)
    return cells.samples + substrate_texture(400, 300, 3.0, seed=4)


@pytest.fixture
def two_tile_stack(textured_surface: np.ndarray) -> TileStack:
    """Two 64x64 tiles cut side by side from the textured surface.

    Returns:
        Stack with ``topo`` and ``amplitude`` channels
    """
    tiles = []
    for index, col in enumerate((0, 48)):
        topo = textured_surface[0:64, col : col + 64]
        amplitude = np.gradient(topo, axis=1)
        tiles.append(
            Tile(
                index=index,
                grids={
                    PRIMARY_CHANNEL: Grid.from_array(topo),
                    SECONDARY_CHANNEL: Grid.from_array(amplitude),
                },
                pixel_size=0.05,
                origin_hint=(0.0, float(index)),
            )
        )
    return TileStack(tiles=tiles, channels=[PRIMARY_CHANNEL, SECONDARY_CHANNEL], meta={"note": "test"})


@pytest.fixture
def stack_manifest(tmp_path: Path, two_tile_stack: TileStack) -> Path:
    """The two-tile stack written to disk.

    Returns:
        Path to its manifest
    """
    return save_stack(two_tile_stack, tmp_path / "stack")


@pytest.fixture
def small_synth_manifest(tmp_path: Path) -> Path:
    """A 2x2 synthetic stack of 64 pixel tiles, quick to process."""
    spec = build_spec(
        rows=2,
        cols=2,
        tile_size=64,
        overlap_frac=0.2,
        max_translation_jitter=1.0,
        max_rotation_jitter=math.radians(0.5),
        seed=5,
    )
    stack, truth = generate(spec)
    manifest = save_stack(stack, tmp_path / "small")
    save_truth(truth, tmp_path / "small" / "truth.json")
    return manifest


def _write_dataset(root: Path, **fields: object) -> tuple[Path, Path]:
    stack, truth = generate(build_spec(**fields))
    manifest = save_stack(stack, root)
    truth_path = root / "truth.json"
    save_truth(truth, truth_path)
    return manifest, truth_path


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory: pytest.TempPathFactory) -> tuple[Path, Path]:
    """Default 3x3 acquisition of 512 pixel tiles.

    Returns:
        (manifest path, truth path)
    """
    return _write_dataset(tmp_path_factory.mktemp("default"))


@pytest.fixture(scope="session")
def featureless_dataset(tmp_path_factory: pytest.TempPathFactory) -> tuple[Path, Path]:
    """3x3 acquisition whose topography carries no detail at all."""
    return _write_dataset(tmp_path_factory.mktemp("featureless"), primary_sparsity=1.0)


@pytest.fixture(scope="session")
def rich_dataset(tmp_path_factory: pytest.TempPathFactory) -> tuple[Path, Path]:
    """3x3 acquisition whose topography keeps every cell and all texture."""
    return _write_dataset(tmp_path_factory.mktemp("rich"), primary_sparsity=0.0)


@pytest.fixture
def tile_points() -> np.ndarray:
    """40 scattered positions inside a 64x64 tile."""
    rng = np.random.default_rng(21)
    return rng.uniform(0.0, 63.0, size=(40, 2))
