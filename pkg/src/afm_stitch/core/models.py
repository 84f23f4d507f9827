"""Pydantic models for the on-disk formats.

This module contains the validated schemas of everything afm-stitch reads
or writes as structured text: stack manifests, mosaic sidecars, ground-truth
files and the stitch report.
"""

from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

RESERVED_CHANNEL = "deriv_x"


class ManifestTile(BaseModel):
    """One tile entry of a stack manifest."""

    model_config = ConfigDict(extra="forbid")

    index: int = Field(..., ge=0, description="Tile id, unique within the stack")
    height: int = Field(..., ge=16, description="Rows in every channel payload")
    width: int = Field(..., ge=16, description="Columns in every channel payload")
    pixel_size: float | None = Field(None, gt=0, description="Micrometers per pixel")
    origin_hint: tuple[float, float] | None = Field(
        None, description="Nominal (row, col) in the acquisition array"
    )
    payloads: dict[str, str] = Field(..., description="Channel name -> relative payload path")


class Manifest(BaseModel):
    """A multi-channel tile stack manifest (version 1)."""

    model_config = ConfigDict(extra="forbid")

    version: Literal[1] = 1
    channels: list[str] = Field(..., min_length=1, description="Measured channel names")
    tiles: list[ManifestTile] = Field(default_factory=list)
    nodata: float | None = Field(None, description="Extra sentinel value marking invalid samples")
    meta: dict[str, Any] = Field(default_factory=dict, description="Free-form acquisition notes")

    @field_validator("channels")
    @classmethod
    def validate_channels(cls, v: list[str]) -> list[str]:
        """Ensure channel names are non-empty, unique and not reserved."""
        if any(not name.strip() for name in v):
            raise ValueError("channel names must be non-empty")
        if len(set(v)) != len(v):
            raise ValueError("channel names must be unique")
        if RESERVED_CHANNEL in v:
            raise ValueError(f"'{RESERVED_CHANNEL}' is reserved for the synthesized channel")
        return v


class GridSidecar(BaseModel):
    """Sidecar manifest describing a single stitched grid payload."""

    model_config = ConfigDict(extra="forbid")

    version: Literal[1] = 1
    kind: Literal["mosaic"] = "mosaic"
    channel: str
    height: int = Field(..., ge=1)
    width: int = Field(..., ge=1)
    payload: str
    extent: tuple[int, int, int, int] = Field(
        ..., description="(min_x, min_y, width, height) in the reference tile frame"
    )
    pixel_size: float | None = None
    reference_tile: int | None = Field(None, description="Tile whose frame the extent is in")


class PoseRecord(BaseModel):
    """Pose of one tile: (a11, a12, tx, a21, a22, ty)."""

    tile: int
    coefficients: tuple[float, float, float, float, float, float]


class DroppedTile(BaseModel):
    """A tile left out of the mosaic, with the reason."""

    tile: int
    reason: str


class PairRecord(BaseModel):
    """Summary of one accepted pair estimate."""

    tile_a: int
    tile_b: int
    num_matches: int
    inliers: int
    confidence: float


class ChannelReport(BaseModel):
    """Feature statistics of one candidate channel."""

    name: str
    mean_detected: float = Field(..., ge=0)
    pairs: int = Field(..., ge=0)
    mean_matched: float = Field(..., ge=0)
    mean_inliers: float = Field(..., ge=0)
    mean_corr: float | None = None
    score: float | None = None


class LayoutReport(BaseModel):
    """Outcome of global pose estimation."""

    reference: int | None = None
    members: list[int] = Field(default_factory=list)
    dropped: list[DroppedTile] = Field(default_factory=list)
    residual_rms_px: float = Field(0.0, ge=0)
    poses: list[PoseRecord] = Field(default_factory=list)


class MetricsReport(BaseModel):
    """Optional quality metrics."""

    ssim: float | None = None
    reg_error_mean_px: float | None = None
    reg_error_max_px: float | None = None


class StitchReport(BaseModel):
    """The structured stitch report (version 1)."""

    version: Literal[1] = 1
    parameters: dict[str, Any] = Field(default_factory=dict)
    channels: list[ChannelReport] = Field(default_factory=list)
    chosen_channel: str
    layout: LayoutReport = Field(default_factory=LayoutReport)
    pairs: list[PairRecord] = Field(default_factory=list)
    metrics: MetricsReport = Field(default_factory=MetricsReport)
    detector: dict[str, Any] = Field(default_factory=dict)
    warnings: list[str] = Field(default_factory=list)


class TruthFile(BaseModel):
    """Ground truth written next to a synthetic stack."""

    version: Literal[1] = 1
    tile_size: int
    poses: list[PoseRecord]
    adjacency: list[tuple[int, int]]

    @model_validator(mode="after")
    def validate_adjacency(self) -> "TruthFile":
        """Ensure adjacency only references known tiles."""
        known = {p.tile for p in self.poses}
        for a, b in self.adjacency:
            if a not in known or b not in known:
                raise ValueError(f"adjacency pair ({a}, {b}) references an unknown tile")
        return self
