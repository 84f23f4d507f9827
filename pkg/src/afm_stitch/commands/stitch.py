"""The ``stitch`` command: run the bi-channel pipeline on a tile stack."""

from pathlib import Path

import typer
from rich.console import Console

from afm_stitch.commands.common import detector_overrides, load_run_config, report_errors
from afm_stitch.config import BlendMode, PoseModel
from afm_stitch.core.pipeline import run_stitch
from afm_stitch.core.preprocess import FlattenMethod
from afm_stitch.utils.formatters import format_tiles, output_data
from afm_stitch.utils.progress import Spinner

console = Console()

CHANNEL_COLUMNS = [
    {"key": "name", "header": "Channel", "style": "cyan bold"},
    {"key": "mean_detected", "header": "Detected/tile", "format": "float"},
    {"key": "pairs", "header": "Pairs"},
    {"key": "mean_matched", "header": "Matched/pair", "format": "float"},
    {"key": "mean_inliers", "header": "Inliers/pair", "format": "float"},
    {"key": "mean_corr", "header": "Grad. corr", "format": "float"},
    {"key": "score", "header": "Score", "format": "float"},
]


def stitch(
    ctx: typer.Context,
    input: Path | None = typer.Option(None, "--input", "-i", help="Stack manifest (manifest.json)"),
    out: Path | None = typer.Option(None, "--out", help="Output directory"),
    primary: str | None = typer.Option(None, "--primary", help="Channel to stitch [default: topo]"),
    secondary: str | None = typer.Option(
        None,
        "--secondary",
        help="Feature channel: a measured channel, deriv_x, primary, or auto [default: auto]",
    ),
    ratio: float | None = typer.Option(None, "--ratio", help="Lowe ratio [default: 0.75]"),
    reproj_px: float | None = typer.Option(
        None, "--reproj-px", help="Inlier reprojection threshold in pixels [default: 3.0]"
    ),
    confidence: float | None = typer.Option(
        None, "--confidence", help="Pair acceptance confidence [default: 1.0]"
    ),
    seed: int | None = typer.Option(None, "--seed", help="Random seed [default: 7]"),
    pose_model: PoseModel | None = typer.Option(
        None, "--pose-model", case_sensitive=False, help="Pose model [default: affine]"
    ),
    huber: float | None = typer.Option(
        None, "--huber", help="Huber loss threshold in pixels for pose refinement"
    ),
    blend: BlendMode | None = typer.Option(
        None, "--blend", case_sensitive=False, help="Blend mode [default: feather]"
    ),
    feather_margin: float | None = typer.Option(
        None, "--feather-margin", help="Feather ramp width in pixels [default: half tile]"
    ),
    no_flatten: bool = typer.Option(False, "--no-flatten", help="Skip line flattening"),
    flatten_method: FlattenMethod | None = typer.Option(
        None, "--flatten-method", help="line_median or line_mean [default: line_median]"
    ),
    no_plane: bool = typer.Option(False, "--no-plane", help="Skip plane removal"),
    no_offset_reconcile: bool = typer.Option(
        False, "--no-offset-reconcile", help="Keep per-tile height baselines"
    ),
    deriv_smooth: float | None = typer.Option(
        None, "--deriv-smooth", help="Gaussian sigma applied before deriv_x [default: 0]"
    ),
    contrast_threshold: float | None = typer.Option(
        None, "--contrast-threshold", help="Detector contrast threshold [default: 0.015]"
    ),
    edge_threshold: float | None = typer.Option(
        None, "--edge-threshold", help="Detector edge threshold [default: 15]"
    ),
    octaves: int | None = typer.Option(None, "--octaves", help="Detector octave cap"),
    grid_hint: bool = typer.Option(
        False, "--grid-hint", help="Only match tiles adjacent by their origin hints"
    ),
    dump_features: bool = typer.Option(
        False, "--dump-features", help="Write per-tile features (JSON + overlay PNG)"
    ),
    truth: Path | None = typer.Option(
        None, "--truth", help="Ground truth (truth.json) for registration error"
    ),
    reference: Path | None = typer.Option(
        None, "--reference", help="Mosaic sidecar (mosaic.json) to compare by SSIM"
    ),
    config: Path | None = typer.Option(
        None, "--config", "-c", help="JSON/YAML run config or a previous report.json"
    ),
    workers: int | None = typer.Option(None, "--workers", "-j", help="Worker threads [default: 1]"),
) -> None:
    """Stitch a tile stack using a feature-rich secondary channel.

    Poses are estimated on the secondary channel and applied to the primary
    channel, which is warped and blended into the mosaic. Writes mosaic.f32,
    mosaic.json, preview.png, layout.json and report.json.

    Examples:
        afm-stitch stitch --input stack/manifest.json --out result
        afm-stitch stitch -i stack/manifest.json --out result --secondary deriv_x
        afm-stitch stitch -i stack/manifest.json --out result --secondary amplitude --truth stack/truth.json
        afm-stitch stitch --config result/report.json --out rerun
    """
    cli_ctx = ctx.obj
    overrides = {
        "input": input,
        "out": out,
        "primary": primary,
        "secondary": secondary,
        "preprocess": {
            "flatten": False if no_flatten else None,
            "flatten_method": flatten_method,
            "plane": False if no_plane else None,
            "deriv_smooth": deriv_smooth,
        },
        "detector": detector_overrides(contrast_threshold, edge_threshold, octaves),
        "matching": {
            "ratio": ratio,
            "reproj_px": reproj_px,
            "confidence": confidence,
            "seed": seed,
            "grid_hint": True if grid_hint else None,
        },
        "pose": {"model": pose_model, "huber_delta": huber},
        "blend": {
            "mode": blend,
            "feather_margin": feather_margin,
            "offset_reconcile": False if no_offset_reconcile else None,
        },
        "truth": truth,
        "reference": reference,
        "dump_features": True if dump_features else None,
        "workers": workers,
    }

    with report_errors():
        run_config = load_run_config(overrides, config)
        with Spinner("Stitching...", console=console, enabled=not cli_ctx.quiet) as spinner:
            result = run_stitch(run_config, status=spinner.update)

    report = result.report
    if cli_ctx.output_format in ("json", "yaml"):
        output_data(report.model_dump(mode="json"), output_format=cli_ctx.output_format)
        return

    if not cli_ctx.quiet:
        output_data(
            [c.model_dump() for c in report.channels],
            output_format="table",
            table_columns=CHANNEL_COLUMNS,
            title="Channel Statistics",
        )
        summary = {
            "chosen_channel": report.chosen_channel,
            "reference_tile": report.layout.reference,
            "stitched_tiles": f"{len(report.layout.members)} ({format_tiles(report.layout.members)})",
            "accepted_pairs": len(report.pairs),
            "residual_rms_px": report.layout.residual_rms_px,
            "extent": "x".join(str(v) for v in result.mosaic.extent.shape[::-1]),
        }
        for key, value in report.metrics.model_dump().items():
            if value is not None:
                summary[key] = value
        output_data(summary, output_format="table", title="Layout")

    for warning in report.warnings:
        console.print(f"[yellow]Warning:[/yellow] {warning}")
    console.print(f"[green]✓[/green] Mosaic written to {result.paths['sidecar']}")
