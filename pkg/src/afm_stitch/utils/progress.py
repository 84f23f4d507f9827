"""Status spinner for long-running pipeline stages."""

from typing import Any

from rich.console import Console
from rich.status import Status


class Spinner:
    """Simple spinner for long-running operations.

    Does nothing when disabled, so quiet runs and redirected output stay clean.
    """

    def __init__(
        self, message: str = "Working", console: Console | None = None, enabled: bool = True
    ):
        """Initialize spinner.

        Args:
            message: Message to display
            console: Rich console instance
            enabled: Show the spinner at all
        """
        self.message = message
        self.console = console or Console()
        self.enabled = enabled
        self._status: Status | None = None

    def __enter__(self) -> "Spinner":
        """Enter context manager."""
        if self.enabled:
            self._status = self.console.status(self.message, spinner="dots")
            self._status.__enter__()
        return self

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        """Exit context manager."""
        if self._status:
            self._status.__exit__(exc_type, exc_val, exc_tb)
            self._status = None

    def update(self, message: str) -> None:
        """Update spinner message.

        Args:
            message: New message to display
        """
        self.message = message
        if self._status:
            self._status.update(message)
