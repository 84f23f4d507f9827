"""Scale-invariant keypoint detection on quantized channel images.

Detection runs OpenCV's SIFT with the configured contrast and edge
thresholds. Keypoints above the octave cap are dropped, as are keypoints
from the 2x upsampled octave when a tile is too large to upsample. Keypoints
whose descriptor window is mostly invalid are discarded so matches never
anchor on masked-out regions.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import cv2
import numpy as np
from numpy.typing import NDArray

from afm_stitch.config import DetectorParams
from afm_stitch.core.exceptions import InputError, OutputError

logger = logging.getLogger(__name__)

DESCRIPTOR_LENGTH = 128
MIN_IMAGE_SIDE = 16
MAX_UPSAMPLED_SIDE = 2048
MAX_INVALID_WINDOW_FRACTION = 0.25
# Descriptor window half-width per unit of keypoint scale: 3 * sqrt(2) * (4 + 1) / 2
DESCRIPTOR_RADIUS_FACTOR = 3.0 * math.sqrt(2.0) * 2.5


@dataclass(frozen=True)
class Keypoint:
    """A detected keypoint.

    Attributes:
        x: Subpixel column
        y: Subpixel row
        scale: Blur scale in image pixels
        orientation: Dominant gradient direction in radians, [0, 2pi)
        response: Absolute DoG response
        octave: Octave the keypoint was found in (-1 is the upsampled one)
    """

    x: float
    y: float
    scale: float
    orientation: float
    response: float
    octave: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "x": self.x,
            "y": self.y,
            "scale": self.scale,
            "orientation": self.orientation,
            "response": self.response,
            "octave": self.octave,
        }


@dataclass(frozen=True)
class FeatureSet:
    """Keypoints and unit-norm descriptors of one tile channel."""

    tile_index: int
    channel: str
    keypoints: list[Keypoint]
    descriptors: NDArray[np.float64] = field(
        default_factory=lambda: np.zeros((0, DESCRIPTOR_LENGTH))
    )
    upsampled: bool = True
    shape: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.descriptors.shape != (len(self.keypoints), DESCRIPTOR_LENGTH):
            raise ValueError(
                f"descriptor array {self.descriptors.shape} does not match "
                f"{len(self.keypoints)} keypoints"
            )

    def __len__(self) -> int:
        return len(self.keypoints)

    @property
    def points(self) -> NDArray[np.float64]:
        """Keypoint positions as an (n, 2) array of (x, y)."""
        if not self.keypoints:
            return np.zeros((0, 2))
        return np.array([(kp.x, kp.y) for kp in self.keypoints], dtype=np.float64)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tile_index": self.tile_index,
            "channel": self.channel,
            "upsampled": self.upsampled,
            "shape": None if self.shape is None else list(self.shape),
            "keypoints": [kp.to_dict() for kp in self.keypoints],
            "descriptors": self.descriptors.tolist(),
        }


def _decode_octave(packed: int) -> int:
    octave = packed & 255
    return octave if octave < 128 else octave - 256


def _invalid_window_fraction(
    invalid: NDArray[np.uint8], xs: NDArray[np.float64], ys: NDArray[np.float64], radii: NDArray[np.float64]
) -> NDArray[np.float64]:
    height, width = invalid.shape
    table = cv2.integral(invalid).astype(np.float64)
    x0 = np.clip(np.floor(xs - radii), 0, width).astype(np.intp)
    x1 = np.clip(np.ceil(xs + radii) + 1, 0, width).astype(np.intp)
    y0 = np.clip(np.floor(ys - radii), 0, height).astype(np.intp)
    y1 = np.clip(np.ceil(ys + radii) + 1, 0, height).astype(np.intp)
    counts = table[y1, x1] - table[y0, x1] - table[y1, x0] + table[y0, x0]
    area = np.maximum((x1 - x0) * (y1 - y0), 1).astype(np.float64)
    return counts / area


def detect(
    img: NDArray[np.uint8],
    params: DetectorParams | None = None,
    valid: NDArray[np.bool_] | None = None,
    tile_index: int = 0,
    channel: str = "",
) -> FeatureSet:
    """Detect keypoints and compute 128-D descriptors.

    Output order is deterministic: response descending, then y, x.

    Args:
        img: Quantized 8-bit image
        params: Detector settings
        valid: Optional validity mask; invalid pixels are never keypoint anchors
        tile_index: Tile id recorded on the result
        channel: Channel name recorded on the result

    Returns:
        The detected feature set

    Raises:
        InputError: If the image is smaller than 16x16
    """
    params = params or DetectorParams()
    if img.ndim != 2 or min(img.shape) < MIN_IMAGE_SIDE:
        raise InputError(
            f"image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {img.shape}",
            tile_index=tile_index,
            channel=channel,
        )
    height, width = img.shape
    upsampled = max(height, width) <= MAX_UPSAMPLED_SIDE
    octave_cap = params.resolved_octaves(height, width)

    sift = cv2.SIFT_create(
        nfeatures=0,
        nOctaveLayers=params.scales_per_octave,
        contrastThreshold=params.contrast_threshold,
        edgeThreshold=params.edge_threshold,
        sigma=params.sigma0,
    )
    mask = None if valid is None else np.where(valid, 255, 0).astype(np.uint8)
    cv_keypoints, cv_descriptors = sift.detectAndCompute(np.ascontiguousarray(img), mask)
    if not cv_keypoints or cv_descriptors is None:
        return FeatureSet(
            tile_index=tile_index,
            channel=channel,
            keypoints=[],
            upsampled=upsampled,
            shape=(height, width),
        )

    octaves = np.array([_decode_octave(kp.octave) for kp in cv_keypoints])
    xs = np.array([kp.pt[0] for kp in cv_keypoints], dtype=np.float64)
    ys = np.array([kp.pt[1] for kp in cv_keypoints], dtype=np.float64)
    scales = np.array([kp.size / 2.0 for kp in cv_keypoints], dtype=np.float64)
    angles = np.array([kp.angle for kp in cv_keypoints], dtype=np.float64)
    responses = np.abs(np.array([kp.response for kp in cv_keypoints], dtype=np.float64))

    # Octave -1 is the upsampled one; the cap counts octaves from the first one built
    first_octave = -1 if upsampled else 0
    keep = (octaves >= first_octave) & (octaves - first_octave < octave_cap)
    keep &= (xs >= 0) & (xs <= width - 1) & (ys >= 0) & (ys <= height - 1) & (scales > 0)
    if valid is not None:
        invalid = np.where(valid, 0, 1).astype(np.uint8)
        fraction = _invalid_window_fraction(invalid, xs, ys, scales * DESCRIPTOR_RADIUS_FACTOR)
        keep &= fraction <= MAX_INVALID_WINDOW_FRACTION

    descriptors = cv_descriptors.astype(np.float64)
    norms = np.linalg.norm(descriptors, axis=1, keepdims=True)
    descriptors = np.divide(descriptors, norms, out=np.zeros_like(descriptors), where=norms > 0)

    orientations = np.mod(np.deg2rad(angles), 2.0 * np.pi)
    idx = np.flatnonzero(keep)
    order = idx[np.lexsort((orientations[idx], scales[idx], xs[idx], ys[idx], -responses[idx]))]

    keypoints = [
        Keypoint(
            x=float(xs[i]),
            y=float(ys[i]),
            scale=float(scales[i]),
            orientation=float(orientations[i]),
            response=float(responses[i]),
            octave=int(octaves[i]),
        )
        for i in order
    ]
    logger.debug(
        f"Tile {tile_index} '{channel}': {len(keypoints)} of {len(cv_keypoints)} keypoints kept"
    )
    return FeatureSet(
        tile_index=tile_index,
        channel=channel,
        keypoints=keypoints,
        descriptors=np.ascontiguousarray(descriptors[order]),
        upsampled=upsampled,
        shape=(height, width),
    )


def detect_all(
    images: list[tuple[NDArray[np.uint8], NDArray[np.bool_]]],
    params: DetectorParams,
    channel: str,
    workers: int = 1,
) -> list[FeatureSet]:
    """Detect on every tile image; output order follows input order."""

    def run(item: tuple[int, tuple[NDArray[np.uint8], NDArray[np.bool_]]]) -> FeatureSet:
        index, (img, valid) = item
        return detect(img, params, valid=valid, tile_index=index, channel=channel)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        return list(executor.map(run, enumerate(images)))


def dump_features(features: FeatureSet, img: NDArray[np.uint8], out_dir: Path) -> list[Path]:
    """Write a feature set as JSON plus a keypoint overlay image.

    Returns:
        Paths of the written JSON and PNG files
    """
    stem = f"features_tile_{features.tile_index:03d}_{features.channel}"
    json_path = out_dir / f"{stem}.json"
    png_path = out_dir / f"{stem}.png"
    cv_keypoints = [
        cv2.KeyPoint(kp.x, kp.y, kp.scale * 2.0, math.degrees(kp.orientation), kp.response)
        for kp in features.keypoints
    ]
    overlay = cv2.drawKeypoints(
        img, cv_keypoints, None, color=(0, 255, 0), flags=cv2.DRAW_MATCHES_FLAGS_DRAW_RICH_KEYPOINTS
    )
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(features.to_dict()))
        if not cv2.imwrite(str(png_path), overlay):
            raise OutputError(f"failed to encode feature overlay {png_path}")
    except OSError as e:
        raise OutputError(f"failed to write feature dump to {out_dir}: {e}") from e
    return [json_path, png_path]
