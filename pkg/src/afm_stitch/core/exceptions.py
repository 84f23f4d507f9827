"""Custom exceptions for afm-stitch.

This module defines a hierarchy of exceptions for the different ways a
stitching run can fail, so the CLI can map each one to a stable exit code
and a helpful message.
"""

from collections.abc import Iterable


class StitchError(Exception):
    """Base exception for all afm-stitch errors.

    All custom exceptions in the package inherit from this base class,
    making it easy to catch every library error in one place.
    """

    pass


class InputError(StitchError):
    """Exception raised for invalid or unreadable input data.

    This includes:
    - Missing manifest or payload files
    - Manifest schema violations
    - Payload size not matching the declared dimensions
    - A tile missing one of the declared channels
    - Stacks with fewer than 2 tiles

    Exit code: 2

    Attributes:
        tile_index: Index of the offending tile, if known
        channel: Name of the offending channel, if known
    """

    def __init__(
        self,
        message: str,
        tile_index: int | None = None,
        channel: str | None = None,
    ):
        """Initialize input error.

        Args:
            message: Error message
            tile_index: Offending tile index
            channel: Offending channel name
        """
        location = []
        if tile_index is not None:
            location.append(f"tile {tile_index}")
        if channel is not None:
            location.append(f"channel '{channel}'")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.tile_index = tile_index
        self.channel = channel


class ConfigurationError(InputError):
    """Exception raised for an invalid run configuration.

    This includes:
    - Unknown or reserved channel names in the configuration
    - Parameters outside their documented ranges
    - Unreadable JSON/YAML configuration files

    Exit code: 2
    """

    pass


class DegenerateGeometryError(StitchError):
    """Exception raised when a geometric problem has no unique solution.

    This includes:
    - Plane fits over collinear pixels
    - Singular (non-invertible) poses
    - Rank-deficient pose refinement systems

    Attributes:
        tiles: Tile indices that are under-constrained, if known
    """

    def __init__(self, message: str, tiles: Iterable[int] = ()):
        """Initialize degenerate geometry error.

        Args:
            message: Error message
            tiles: Under-constrained tile indices
        """
        self.tiles = sorted(tiles)
        if self.tiles:
            message = f"{message} (tiles: {', '.join(str(t) for t in self.tiles)})"
        super().__init__(message)


class StitchImpossibleError(StitchError):
    """Exception raised when no tile pair could be registered.

    Exit code: 3
    """

    pass


class OutputError(StitchError):
    """Exception raised when results cannot be written.

    This includes:
    - I/O failures in the output directory
    - Mosaics without a single valid pixel
    """

    pass
