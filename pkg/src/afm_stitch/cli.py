"""Main CLI application entry point.

This module defines the main Typer application with global options
and registers all subcommands.
"""

import logging
import sys
import time
from pathlib import Path

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.traceback import install as install_rich_traceback

from afm_stitch import __version__
from afm_stitch.commands import analysis as analysis_commands
from afm_stitch.commands import convert as convert_commands
from afm_stitch.commands import stitch as stitch_commands
from afm_stitch.commands import synth as synth_commands
from afm_stitch.commands.common import EXIT_FAILURE, EXIT_INVALID_INPUT, EXIT_STITCH_IMPOSSIBLE
from afm_stitch.core.exceptions import InputError, StitchError, StitchImpossibleError

# Install rich traceback handler for better error display
install_rich_traceback(show_locals=False)

console = Console()

OUTPUT_FORMATS = ("table", "json", "yaml")

app = typer.Typer(
    name="afm-stitch",
    help="Bi-channel aided stitching of atomic force microscopy tile stacks",
    add_completion=False,
    rich_markup_mode="rich",
    no_args_is_help=True,
)

app.command("stitch")(stitch_commands.stitch)
app.command("synth")(synth_commands.synth)
app.command("score")(analysis_commands.score)
app.command("stats")(analysis_commands.stats)
app.command("ssim")(analysis_commands.ssim)
app.command("import")(convert_commands.import_stack)


class CLIContext:
    """Shared context for CLI commands."""

    def __init__(
        self,
        output_format: str = "table",
        verbose: int = 0,
        quiet: bool = False,
        log_file: Path | None = None,
    ):
        self.output_format = output_format
        self.verbose = verbose
        self.quiet = quiet
        self.log_file = log_file


def configure_logging(verbose: int, quiet: bool, log_file: Path | None) -> None:
    """Route library logging to a Rich console handler and an optional file.

    Args:
        verbose: Count of -v flags
        quiet: Suppress console logging
        log_file: File that receives every record at DEBUG level
    """
    if verbose == 0 and not quiet:
        log_level = logging.WARNING
    elif verbose == 1:
        log_level = logging.INFO
    elif verbose >= 2:
        log_level = logging.DEBUG
    else:
        log_level = logging.ERROR

    handlers: list[logging.Handler] = []
    if not quiet:
        console_handler = RichHandler(
            console=Console(stderr=True),
            show_time=verbose >= 2,
            show_path=verbose >= 3,
            rich_tracebacks=True,
        )
        console_handler.setLevel(log_level)
        handlers.append(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(
            logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
        )
        handlers.append(file_handler)

    logging.basicConfig(
        level=logging.DEBUG if log_file else log_level,
        format="%(message)s",
        handlers=handlers,
        force=True,
    )


def version_callback(value: bool) -> None:
    """Print the version and stop before any command runs."""
    if value:
        console.print(f"afm-stitch version {__version__}")
        raise typer.Exit(0)


@app.callback()
def main_callback(
    ctx: typer.Context,
    output_format: str = typer.Option(
        "table",
        "--output-format",
        "-o",
        help="Output format: table, json, yaml",
    ),
    verbose: int = typer.Option(
        0,
        "--verbose",
        "-v",
        count=True,
        help="Increase verbosity (-v for stages, -vv for per-tile detail)",
    ),
    quiet: bool = typer.Option(
        False,
        "--quiet",
        "-q",
        help="Suppress non-essential output",
    ),
    log_file: Path | None = typer.Option(
        None,
        "--log-file",
        help="Write logs to file",
        exists=False,
    ),
    version: bool | None = typer.Option(
        None,
        "--version",
        "-V",
        help="Show version and exit",
        callback=version_callback,
        is_eager=True,
    ),
) -> None:
    """afm-stitch - stitch AFM tile stacks with a feature-rich second channel.

    Global options can be used with any command to control behavior.

    Examples:
        afm-stitch synth --out stack
        afm-stitch -v stitch --input stack/manifest.json --out result --secondary deriv_x
        afm-stitch --output-format json score --input stack/manifest.json
        afm-stitch --log-file debug.log -vv stitch --input stack/manifest.json --out result
    """
    if output_format not in OUTPUT_FORMATS:
        raise typer.BadParameter(
            f"must be one of: {', '.join(OUTPUT_FORMATS)}", param_hint="--output-format"
        )

    configure_logging(verbose, quiet, log_file)

    logger = logging.getLogger(__name__)
    logger.debug(f"afm-stitch v{__version__}")
    logger.debug(f"Verbosity level: {verbose}")
    logger.debug(f"Output format: {output_format}")

    ctx.obj = CLIContext(
        output_format=output_format,
        verbose=verbose,
        quiet=quiet,
        log_file=log_file,
    )


def main() -> None:
    """Main entry point with error handling.

    This function wraps the Typer app to provide consistent error handling
    and proper exit codes for errors that escape the commands.
    """
    start_time = time.time()

    try:
        app()
    except InputError as e:
        console.print(f"[bold red]Input Error:[/bold red] {e}")
        sys.exit(EXIT_INVALID_INPUT)
    except StitchImpossibleError as e:
        console.print(f"[bold red]Stitch Impossible:[/bold red] {e}")
        console.print("\n[yellow]Tip:[/yellow] Inspect channels with 'afm-stitch score'")
        sys.exit(EXIT_STITCH_IMPOSSIBLE)
    except StitchError as e:
        console.print(f"[bold red]Stitch Error:[/bold red] {e}")
        if e.__cause__:
            console.print(f"[dim]Caused by: {e.__cause__}[/dim]")
        sys.exit(EXIT_FAILURE)
    except KeyboardInterrupt:
        console.print("\n[yellow]Operation cancelled by user[/yellow]")
        sys.exit(130)
    except Exception as e:
        console.print(f"[bold red]Unexpected Error:[/bold red] {e}")
        console.print("\n[dim]This is a bug. Please report it with the -vv output.[/dim]")
        sys.exit(EXIT_FAILURE)
    finally:
        logging.getLogger(__name__).debug(f"Finished in {time.time() - start_time:.2f}s")


if __name__ == "__main__":
    main()
