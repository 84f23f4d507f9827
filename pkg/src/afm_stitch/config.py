"""Run configuration for afm-stitch.

This module holds the validated parameter models of a stitch run and the
loader that reads them back from a config file or from the ``parameters``
section of a previous report, so a report can be replayed as a rerun.
"""

import json
import math
from enum import Enum
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from afm_stitch.core.exceptions import ConfigurationError
from afm_stitch.core.models import RESERVED_CHANNEL
from afm_stitch.core.preprocess import FlattenMethod

AUTO_CHANNEL = "auto"
PRIMARY_ALIAS = "primary"


class PreprocessOptions(BaseModel):
    """Topography correction and channel synthesis toggles.

    Attributes:
        flatten: Remove per-line offsets from the primary channel
        flatten_method: ``line_median`` or ``line_mean``
        plane: Subtract the best-fit plane from the primary channel
        deriv_smooth: Gaussian sigma applied before differentiation (0 disables)
    """

    model_config = ConfigDict(extra="forbid")

    flatten: bool = Field(True, description="Line-flatten the primary channel")
    flatten_method: FlattenMethod = Field(FlattenMethod.LINE_MEDIAN)
    plane: bool = Field(True, description="Remove the best-fit plane")
    deriv_smooth: float = Field(0.0, ge=0.0, le=10.0)

    @field_validator("flatten_method")
    @classmethod
    def validate_flatten_method(cls, v: FlattenMethod) -> FlattenMethod:
        """Plane removal has its own switch."""
        if v is FlattenMethod.PLANE:
            raise ValueError("flatten_method must be line_median or line_mean")
        return v


class DetectorParams(BaseModel):
    """Scale-invariant keypoint detector settings.

    Attributes:
        contrast_threshold: Minimum DoG response on intensities scaled to [0, 1]
        edge_threshold: Principal-curvature ratio limit
        octaves: Octave cap; None derives floor(log2(min(H, W))) - 3
        scales_per_octave: DoG layers per octave
        sigma0: Base blur of the first octave
    """

    model_config = ConfigDict(extra="forbid")

    contrast_threshold: float = Field(0.015, gt=0.0)
    edge_threshold: float = Field(15.0, gt=1.0)
    octaves: int | None = Field(None, ge=1)
    scales_per_octave: int = Field(3, ge=1, le=10)
    sigma0: float = Field(1.6, gt=0.0)

    def resolved_octaves(self, height: int, width: int) -> int:
        """Octave count used for an image of the given size."""
        if self.octaves is not None:
            return self.octaves
        return max(1, int(math.floor(math.log2(min(height, width)))) - 3)


class MatchParams(BaseModel):
    """Descriptor matching and robust pair estimation settings."""

    model_config = ConfigDict(extra="forbid")

    ratio: float = Field(0.75, gt=0.0, lt=1.0, description="Lowe ratio")
    reproj_px: float = Field(3.0, gt=0.0, description="Inlier reprojection threshold")
    confidence: float = Field(1.0, gt=0.0, description="Pair acceptance confidence")
    seed: int = Field(7, ge=0, description="Global RANSAC seed")
    max_iterations: int = Field(2000, ge=1)
    early_exit_ratio: float = Field(0.9, gt=0.0, le=1.0)
    grid_hint: bool = Field(False, description="Only match tiles adjacent by origin hint")
    min_overlap: float = Field(
        0.04, ge=0.0, lt=1.0, description="Smallest footprint overlap share of an accepted pair"
    )
    max_candidates: int = Field(8, ge=0, description="Screened partners per tile; 0 keeps all")
    screen_features: int = Field(256, ge=8, description="Strongest keypoints used for screening")


class PoseModel(str, Enum):
    AFFINE = "affine"
    SIMILARITY = "similarity"


class PoseOptions(BaseModel):
    """Global pose refinement settings.

    Attributes:
        model: Per-tile transform family
        huber_delta: Huber loss threshold in pixels; None keeps pure least squares
    """

    model_config = ConfigDict(extra="forbid")

    model: PoseModel = Field(PoseModel.AFFINE)
    huber_delta: float | None = Field(None, gt=0.0)


class BlendMode(str, Enum):
    FEATHER = "feather"
    NEAREST = "nearest"


class BlendSpec(BaseModel):
    """Compositing settings.

    Attributes:
        mode: ``feather`` (weighted mean) or ``nearest`` (max weight wins)
        feather_margin: Ramp width in pixels; None ramps over half the tile
        offset_reconcile: Estimate and remove per-tile height baselines
    """

    model_config = ConfigDict(extra="forbid")

    mode: BlendMode = Field(BlendMode.FEATHER)
    feather_margin: float | None = Field(None, gt=0.0)
    offset_reconcile: bool = Field(True)


class ScoreWeights(BaseModel):
    """Weights of the z-scores combined into a channel score."""

    model_config = ConfigDict(extra="forbid")

    matched: float = 1.0
    detected: float = 1.0
    corr: float = 1.0


class RunConfig(BaseModel):
    """Complete configuration of one stitch run.

    ``workers`` only affects scheduling and is excluded from serialization so
    that reports are identical across thread counts.
    """

    model_config = ConfigDict(extra="forbid")

    input: Path = Field(..., description="Stack manifest")
    out: Path = Field(Path("stitch_out"), description="Output directory", exclude=True)
    primary: str = Field("topo", min_length=1)
    secondary: str = Field(AUTO_CHANNEL, min_length=1)
    preprocess: PreprocessOptions = Field(default_factory=PreprocessOptions)
    detector: DetectorParams = Field(default_factory=DetectorParams)
    matching: MatchParams = Field(default_factory=MatchParams)
    pose: PoseOptions = Field(default_factory=PoseOptions)
    blend: BlendSpec = Field(default_factory=BlendSpec)
    score_weights: ScoreWeights = Field(default_factory=ScoreWeights)
    truth: Path | None = Field(None, description="Ground-truth file for registration error")
    reference: Path | None = Field(None, description="Mosaic sidecar to compare by SSIM")
    dump_features: bool = False
    workers: int = Field(1, ge=1, le=256, exclude=True)

    @model_validator(mode="after")
    def validate_channels(self) -> "RunConfig":
        """Check the primary/secondary pairing."""
        if self.primary == RESERVED_CHANNEL:
            raise ValueError(f"'{RESERVED_CHANNEL}' cannot be the primary channel")
        if self.primary in (AUTO_CHANNEL, PRIMARY_ALIAS):
            raise ValueError(f"'{self.primary}' is not a channel name")
        return self

    @property
    def direct(self) -> bool:
        """True when features come from the primary channel itself."""
        return self.secondary in (self.primary, PRIMARY_ALIAS)

    def parameters(self) -> dict[str, Any]:
        """Serializable parameters recorded in the report."""
        return self.model_dump(mode="json")


def _read_document(path: Path) -> Any:
    if not path.is_file():
        raise ConfigurationError(f"Configuration file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() in (".yaml", ".yml"):
            return yaml.safe_load(text)
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Invalid JSON in configuration file {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Invalid YAML in configuration file {path}: {e}") from e


def load_config_file(path: Path) -> dict[str, Any]:
    """Read run parameters from a config file or a previous report.

    A report is recognized by its ``parameters`` and ``chosen_channel`` keys;
    only its ``parameters`` section is returned.

    Raises:
        ConfigurationError: If the file cannot be read or is not a mapping
    """
    data = _read_document(path)
    if not isinstance(data, dict):
        raise ConfigurationError(f"Configuration file {path} must contain a mapping")
    if "parameters" in data and "chosen_channel" in data:
        data = data["parameters"]
        if not isinstance(data, dict):
            raise ConfigurationError(f"Report {path} has no usable parameters section")
    return data


def _merge(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            current = merged.get(key)
            merged[key] = _merge(current if isinstance(current, dict) else {}, value)
        else:
            merged[key] = value
    return merged


def build_run_config(
    overrides: dict[str, Any], config_path: Path | None = None
) -> RunConfig:
    """Combine a config file with explicitly given options.

    Args:
        overrides: Nested option values; ``None`` means "not given"
        config_path: Optional config or report file

    Returns:
        Validated run configuration

    Raises:
        ConfigurationError: If the merged configuration does not validate
    """
    base = load_config_file(config_path) if config_path else {}
    merged = _merge(base, overrides)
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid run configuration: {e}") from e
