"""The ``synth`` command: write a synthetic tile stack with ground truth."""

import math
from pathlib import Path

import typer
from rich.console import Console

from afm_stitch.commands.common import report_errors
from afm_stitch.core.synth import build_spec, generate, save_truth
from afm_stitch.core.tile_store import save_stack
from afm_stitch.utils.formatters import output_data
from afm_stitch.utils.progress import Spinner

console = Console()


def synth(
    ctx: typer.Context,
    out: Path = typer.Option(..., "--out", help="Directory receiving the stack"),
    rows: int = typer.Option(3, "--rows", help="Tile rows (3, 5 and 7 mirror common acquisitions)"),
    cols: int = typer.Option(3, "--cols", help="Tile columns"),
    tile_size: int = typer.Option(512, "--tile-size", help="Tile side in pixels"),
    overlap: float = typer.Option(0.10, "--overlap", help="Overlap fraction between neighbours"),
    jitter_px: float = typer.Option(5.0, "--jitter-px", help="Max translation jitter in pixels"),
    jitter_deg: float = typer.Option(1.0, "--jitter-deg", help="Max rotation jitter in degrees"),
    sparsity: float = typer.Option(
        0.9, "--sparsity", help="Fraction of texture suppressed in the topography channel"
    ),
    line_noise: float = typer.Option(2.0, "--line-noise", help="Per-line offset amplitude"),
    cell_density: float = typer.Option(24.0, "--cell-density", help="Cells per tile area"),
    tilt: float = typer.Option(0.004, "--tilt", help="Max per-tile plane slope"),
    seed: int = typer.Option(7, "--seed", help="Random seed"),
) -> None:
    """Generate a synthetic bi-channel stack (topo + amplitude) and truth.json.

    Prints the manifest path on success.

    Examples:
        afm-stitch synth --out stack
        afm-stitch synth --out stack7 --rows 7 --cols 7
        afm-stitch synth --out rich --sparsity 0 --seed 11
    """
    cli_ctx = ctx.obj
    with report_errors():
        spec = build_spec(
            rows=rows,
            cols=cols,
            tile_size=tile_size,
            overlap_frac=overlap,
            max_translation_jitter=jitter_px,
            max_rotation_jitter=math.radians(jitter_deg),
            primary_sparsity=sparsity,
            line_noise_amp=line_noise,
            cell_density=cell_density,
            max_tilt=tilt,
            seed=seed,
        )
        with Spinner("Generating tiles...", console=console, enabled=not cli_ctx.quiet):
            stack, truth = generate(spec)
            manifest = save_stack(stack, out)
            save_truth(truth, out / "truth.json")

    if cli_ctx.output_format in ("json", "yaml"):
        output_data(
            {
                "manifest": str(manifest),
                "truth": str(out / "truth.json"),
                "tiles": len(stack.tiles),
                "adjacent_pairs": len(truth.adjacency),
            },
            output_format=cli_ctx.output_format,
        )
        return
    console.print(str(manifest), soft_wrap=True, highlight=False)
