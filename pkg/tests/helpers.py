"""Builders for feature sets and pair estimates with known geometry."""

import numpy as np

from afm_stitch.core.features import FeatureSet, Keypoint
from afm_stitch.core.matching import AffineTransform, Match, PairEstimate


def make_features(
    tile_index: int, points: np.ndarray, descriptors: np.ndarray, channel: str = "amplitude"
) -> FeatureSet:
    """Build a feature set from raw positions and descriptors."""
    keypoints = [
        Keypoint(x=float(x), y=float(y), scale=2.0, orientation=0.0, response=1.0)
        for x, y in points
    ]
    return FeatureSet(
        tile_index=tile_index,
        channel=channel,
        keypoints=keypoints,
        descriptors=np.asarray(descriptors, dtype=np.float64),
    )


def unit_descriptors(count: int, seed: int) -> np.ndarray:
    """Random unit-norm 128-D descriptors."""
    rng = np.random.default_rng(seed)
    d = np.abs(rng.standard_normal((count, 128)))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def exact_edge(
    tile_a: int,
    tile_b: int,
    transform: AffineTransform,
    points_b: np.ndarray,
    confidence: float = 2.0,
) -> PairEstimate:
    """A pair estimate whose inliers satisfy ``transform`` exactly."""
    points_a = transform.apply(points_b)
    inliers = [Match(k, k, 0.0) for k in range(len(points_b))]
    return PairEstimate(
        tile_a=tile_a,
        tile_b=tile_b,
        transform=transform,
        inliers=inliers,
        num_matches=len(points_b),
        confidence=confidence,
        points_a=points_a,
        points_b=np.asarray(points_b, dtype=np.float64),
    )


