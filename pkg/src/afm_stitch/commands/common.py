"""Helpers shared by command modules: error reporting and run configuration."""

import logging
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Any

import typer
from rich.console import Console

from afm_stitch.config import RunConfig, build_run_config
from afm_stitch.core.exceptions import (
    ConfigurationError,
    InputError,
    StitchError,
    StitchImpossibleError,
)

console = Console()
logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_INVALID_INPUT = 2
EXIT_STITCH_IMPOSSIBLE = 3


@contextmanager
def report_errors() -> Iterator[None]:
    """Print library errors the CLI way and exit with the matching code.

    Raises:
        typer.Exit: 2 for invalid input, 3 when stitching is impossible, 1 otherwise
    """
    try:
        yield
    except ConfigurationError as e:
        console.print(f"[bold red]Configuration Error:[/bold red] {e}")
        console.print("\n[yellow]Tip:[/yellow] Check option values or the --config file")
        raise typer.Exit(EXIT_INVALID_INPUT)
    except InputError as e:
        console.print(f"[bold red]Input Error:[/bold red] {e}")
        console.print("\n[yellow]Tip:[/yellow] Check the manifest and its payload files")
        raise typer.Exit(EXIT_INVALID_INPUT)
    except StitchImpossibleError as e:
        console.print(f"[bold red]Stitch Impossible:[/bold red] {e}")
        console.print(
            "\n[yellow]Tip:[/yellow] Inspect feature-rich channels with 'afm-stitch score' "
            "and pass one with --secondary"
        )
        raise typer.Exit(EXIT_STITCH_IMPOSSIBLE)
    except StitchError as e:
        console.print(f"[bold red]Stitch Error:[/bold red] {e}")
        if e.__cause__:
            console.print(f"[dim]Caused by: {e.__cause__}[/dim]")
        raise typer.Exit(EXIT_FAILURE)


def load_run_config(overrides: dict[str, Any], config_path: Path | None) -> RunConfig:
    """Merge a config file with explicitly given options and validate."""
    run_config = build_run_config(overrides, config_path)
    logger.debug(f"Run configuration: {run_config.model_dump_json()}")
    return run_config


def detector_overrides(
    contrast_threshold: float | None, edge_threshold: float | None, octaves: int | None
) -> dict[str, Any]:
    return {
        "contrast_threshold": contrast_threshold,
        "edge_threshold": edge_threshold,
        "octaves": octaves,
    }
