"""The ``import`` command: convert exported images into a native stack."""

import glob
from pathlib import Path

import typer
from rich.console import Console

from afm_stitch.commands.common import report_errors
from afm_stitch.core.exceptions import InputError
from afm_stitch.core.tile_store import import_images

console = Console()


def parse_channel_spec(spec: str) -> tuple[str, list[Path]]:
    """Split ``NAME=PATTERN`` into the channel name and its sorted files.

    Raises:
        InputError: If the spec is malformed or the pattern matches nothing
    """
    name, sep, pattern = spec.partition("=")
    if not sep or not name.strip() or not pattern.strip():
        raise InputError(f"channel spec must look like NAME=PATTERN, got '{spec}'")
    files = sorted(Path(p) for p in glob.glob(pattern.strip()))
    if not files:
        raise InputError(f"pattern '{pattern}' matches no files", channel=name.strip())
    return name.strip(), files


def import_stack(
    ctx: typer.Context,
    channel: list[str] = typer.Option(
        ..., "--channel", help="NAME=PATTERN, one per channel; files sort into tile order"
    ),
    out: Path = typer.Option(..., "--out", help="Directory receiving the stack"),
    pixel_size: float | None = typer.Option(None, "--pixel-size", help="Micrometers per pixel"),
    grid_cols: int | None = typer.Option(
        None, "--grid-cols", help="Columns of the acquisition array, for origin hints"
    ),
) -> None:
    """Convert 8/16-bit or float images (one per tile and channel) into a stack.

    Examples:
        afm-stitch import --channel "topo=scan/*_height.tif" --channel "amplitude=scan/*_amp.tif" --out stack
    """
    with report_errors():
        channel_files = dict(parse_channel_spec(spec) for spec in channel)
        if len(channel_files) != len(channel):
            raise InputError("each channel may be given only once")
        manifest = import_images(channel_files, out, pixel_size=pixel_size, grid_cols=grid_cols)
    console.print(str(manifest), soft_wrap=True, highlight=False)
