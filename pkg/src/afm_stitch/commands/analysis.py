"""Channel analysis commands: ``score``, ``stats`` and ``ssim``."""

from pathlib import Path

import typer
from rich.console import Console

from afm_stitch.commands.common import detector_overrides, load_run_config, report_errors
from afm_stitch.core.analytics import channel_score, evaluate_channel, placed_ssim
from afm_stitch.core.pipeline import candidate_channels
from afm_stitch.core.tile_store import load_mosaic, load_stack
from afm_stitch.utils.formatters import output_data
from afm_stitch.utils.progress import Spinner

console = Console()

SCORE_COLUMNS = [
    {"key": "rank", "header": "#"},
    {"key": "channel", "header": "Channel", "style": "cyan bold"},
    {"key": "score", "header": "Score", "format": "float"},
    {"key": "mean_detected", "header": "Detected/tile", "format": "float"},
    {"key": "mean_matched", "header": "Matched/pair", "format": "float"},
    {"key": "mean_corr", "header": "Grad. corr", "format": "float"},
    {"key": "pairs", "header": "Pairs"},
]

STATS_COLUMNS = [
    {"key": "name", "header": "Channel", "style": "cyan bold"},
    {"key": "mean_detected", "header": "Detected/tile", "format": "float"},
    {"key": "pairs", "header": "Pairs"},
    {"key": "mean_matched", "header": "Matched/pair", "format": "float"},
    {"key": "mean_inliers", "header": "Inliers/pair", "format": "float"},
]


def _analysis_overrides(
    input: Path | None,
    primary: str | None,
    ratio: float | None,
    seed: int | None,
    contrast_threshold: float | None,
    edge_threshold: float | None,
    workers: int | None,
) -> dict[str, object]:
    return {
        "input": input,
        "primary": primary,
        "detector": detector_overrides(contrast_threshold, edge_threshold, None),
        "matching": {"ratio": ratio, "seed": seed},
        "workers": workers,
    }


def score(
    ctx: typer.Context,
    input: Path | None = typer.Option(None, "--input", "-i", help="Stack manifest"),
    primary: str | None = typer.Option(None, "--primary", help="Primary channel [default: topo]"),
    channel: list[str] | None = typer.Option(
        None, "--channel", help="Candidate channel (repeatable) [default: all, deriv_x, primary]"
    ),
    ratio: float | None = typer.Option(None, "--ratio", help="Lowe ratio"),
    seed: int | None = typer.Option(None, "--seed", help="Random seed"),
    contrast_threshold: float | None = typer.Option(None, "--contrast-threshold"),
    edge_threshold: float | None = typer.Option(None, "--edge-threshold"),
    config: Path | None = typer.Option(None, "--config", "-c", help="Run config or report"),
    workers: int | None = typer.Option(None, "--workers", "-j", help="Worker threads"),
) -> None:
    """Rank candidate secondary channels by feature richness and correlation.

    Examples:
        afm-stitch score -i stack/manifest.json
        afm-stitch score -i stack/manifest.json --channel amplitude --channel deriv_x
    """
    cli_ctx = ctx.obj
    overrides = _analysis_overrides(
        input, primary, ratio, seed, contrast_threshold, edge_threshold, workers
    )
    with report_errors():
        run_config = load_run_config(overrides, config)
        with Spinner("Scoring channels...", console=console, enabled=not cli_ctx.quiet):
            stack = load_stack(run_config.input, run_config.workers)
            candidates = channel or candidate_channels(stack, run_config.primary)
            ranking, _ = channel_score(
                stack,
                candidates,
                run_config.detector,
                run_config.primary,
                matching=run_config.matching,
                preprocess=run_config.preprocess,
                weights=run_config.score_weights,
                workers=run_config.workers,
            )

    rows = [
        {
            "rank": k + 1,
            "channel": s.channel,
            "score": s.score,
            "mean_detected": s.mean_detected,
            "mean_matched": s.mean_matched,
            "mean_corr": s.mean_corr,
            "pairs": s.pairs,
        }
        for k, s in enumerate(ranking)
    ]
    output_data(
        rows,
        output_format=cli_ctx.output_format,
        table_columns=SCORE_COLUMNS,
        title="Channel Ranking",
    )


def stats(
    ctx: typer.Context,
    input: Path | None = typer.Option(None, "--input", "-i", help="Stack manifest"),
    primary: str | None = typer.Option(None, "--primary", help="Primary channel [default: topo]"),
    channel: list[str] | None = typer.Option(
        None, "--channel", help="Channel to analyse (repeatable) [default: all, deriv_x, primary]"
    ),
    ratio: float | None = typer.Option(None, "--ratio", help="Lowe ratio"),
    seed: int | None = typer.Option(None, "--seed", help="Random seed"),
    contrast_threshold: float | None = typer.Option(None, "--contrast-threshold"),
    edge_threshold: float | None = typer.Option(None, "--edge-threshold"),
    config: Path | None = typer.Option(None, "--config", "-c", help="Run config or report"),
    workers: int | None = typer.Option(None, "--workers", "-j", help="Worker threads"),
) -> None:
    """Detected and matched feature statistics per channel.

    Examples:
        afm-stitch stats -i stack/manifest.json
        afm-stitch --output-format json stats -i stack/manifest.json --channel amplitude
    """
    cli_ctx = ctx.obj
    overrides = _analysis_overrides(
        input, primary, ratio, seed, contrast_threshold, edge_threshold, workers
    )
    with report_errors():
        run_config = load_run_config(overrides, config)
        with Spinner("Collecting feature statistics...", console=console, enabled=not cli_ctx.quiet):
            stack = load_stack(run_config.input, run_config.workers)
            names = channel or candidate_channels(stack, run_config.primary)
            reports = [
                evaluate_channel(
                    stack,
                    name,
                    run_config.primary,
                    run_config.preprocess,
                    run_config.detector,
                    run_config.matching,
                    run_config.workers,
                ).stats()
                for name in names
            ]

    output_data(
        [r.model_dump(exclude={"mean_corr", "score"}) for r in reports],
        output_format=cli_ctx.output_format,
        table_columns=STATS_COLUMNS,
        title="Detected and Matched Features",
    )


def ssim(
    ctx: typer.Context,
    first: Path = typer.Argument(..., help="First mosaic sidecar (mosaic.json)"),
    second: Path = typer.Argument(..., help="Second mosaic sidecar (mosaic.json)"),
) -> None:
    """Structural similarity of two stitched grids over jointly valid pixels.

    Both mosaics are cropped to the overlap of their extents first, so runs
    that covered slightly different canvases can still be compared.

    Examples:
        afm-stitch ssim direct/mosaic.json bichannel/mosaic.json
    """
    cli_ctx = ctx.obj
    with report_errors():
        value = placed_ssim(load_mosaic(first), load_mosaic(second))

    if cli_ctx.output_format in ("json", "yaml"):
        output_data({"ssim": value}, output_format=cli_ctx.output_format)
    else:
        console.print(f"SSIM: [bold]{value:.6f}[/bold]")
