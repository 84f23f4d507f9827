"""Feature statistics, quality metrics and secondary-channel scoring.

The per-channel statistics mirror the detected/matched feature comparison
used to pick a stitching channel: mean keypoints per tile, accepted pairs,
mean matches and inliers per pair. ``channel_score`` combines those with the
gradient correlation against the primary channel into one ranking.
"""

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from afm_stitch.config import DetectorParams, MatchParams, PreprocessOptions, ScoreWeights
from afm_stitch.core.exceptions import InputError
from afm_stitch.core.features import FeatureSet, detect_all
from afm_stitch.core.matching import AffineTransform, PairGraph, match_all
from afm_stitch.core.models import RESERVED_CHANNEL, ChannelReport
from afm_stitch.core.pose_graph import Layout
from afm_stitch.core.preprocess import Grid, derive_x, normalize_u8, preprocess_primary
from afm_stitch.core.tile_store import PlacedGrid, TileStack

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03
GAUGE_IRLS_ROUNDS = 200
GAUGE_IRLS_EPS = 1e-9


def feature_stats(
    features: list[FeatureSet], graph: PairGraph, channel: str | None = None
) -> ChannelReport:
    """Detected and matched feature statistics of one channel."""
    name = channel if channel is not None else (features[0].channel if features else "")
    detected = [len(fs) for fs in features]
    return ChannelReport(
        name=name,
        mean_detected=float(np.mean(detected)) if detected else 0.0,
        pairs=len(graph.edges),
        mean_matched=float(np.mean([e.num_matches for e in graph.edges])) if graph.edges else 0.0,
        mean_inliers=(
            float(np.mean([e.inlier_count for e in graph.edges])) if graph.edges else 0.0
        ),
    )


def ssim(a: Grid, b: Grid) -> float:
    """Structural similarity over jointly valid pixels.

    Uses 8x8 windows that lie entirely on jointly valid pixels, k1=0.01,
    k2=0.03 and the joint valid min-max as dynamic range. If no complete
    window fits, the jointly valid pixels form a single window.

    Raises:
        InputError: On a shape mismatch or without jointly valid pixels
    """
    if a.shape != b.shape:
        raise InputError(f"cannot compare grids of shape {a.shape} and {b.shape}")
    joint = a.valid & b.valid
    if not joint.any():
        raise InputError("grids have no jointly valid pixels")

    va = np.where(joint, a.samples, 0.0)
    vb = np.where(joint, b.samples, 0.0)
    lo = min(float(va[joint].min()), float(vb[joint].min()))
    hi = max(float(va[joint].max()), float(vb[joint].max()))
    span = hi - lo if hi > lo else 1.0
    c1 = (SSIM_K1 * span) ** 2
    c2 = (SSIM_K2 * span) ** 2

    full = ndimage.minimum_filter(joint.astype(np.uint8), size=SSIM_WINDOW, mode="constant", cval=0)
    windows = full.astype(bool)
    if windows.any():

        def local_mean(x: FloatArray) -> FloatArray:
            return ndimage.uniform_filter(x, size=SSIM_WINDOW, mode="constant")[windows]

        mu_a, mu_b = local_mean(va), local_mean(vb)
        var_a = local_mean(va * va) - mu_a * mu_a
        var_b = local_mean(vb * vb) - mu_b * mu_b
        cov = local_mean(va * vb) - mu_a * mu_b
    else:
        xa, xb = va[joint], vb[joint]
        mu_a, mu_b = np.array([xa.mean()]), np.array([xb.mean()])
        var_a = np.array([(xa * xa).mean()]) - mu_a * mu_a
        var_b = np.array([(xb * xb).mean()]) - mu_b * mu_b
        cov = np.array([(xa * xb).mean()]) - mu_a * mu_b

    num = (2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


def align_grids(a: PlacedGrid, b: PlacedGrid) -> tuple[Grid, Grid]:
    """Crop two placed grids to the intersection of their extents.

    Raises:
        InputError: If the grids are in different reference frames, do not
            match their extents or do not overlap
    """
    if a.reference_tile is not None and b.reference_tile is not None:
        if a.reference_tile != b.reference_tile:
            raise InputError(
                f"mosaics are in the frames of different reference tiles "
                f"({a.reference_tile} and {b.reference_tile})"
            )
    for placed in (a, b):
        width, height = placed.extent[2], placed.extent[3]
        if placed.grid.shape != (height, width):
            raise InputError(
                f"grid of shape {placed.grid.shape} does not fill its extent {placed.extent}"
            )

    x0 = max(a.extent[0], b.extent[0])
    y0 = max(a.extent[1], b.extent[1])
    x1 = min(a.extent[0] + a.extent[2], b.extent[0] + b.extent[2])
    y1 = min(a.extent[1] + a.extent[3], b.extent[1] + b.extent[3])
    if x1 <= x0 or y1 <= y0:
        raise InputError(f"extents {a.extent} and {b.extent} do not overlap")

    def crop(placed: PlacedGrid) -> Grid:
        rows = slice(y0 - placed.extent[1], y1 - placed.extent[1])
        cols = slice(x0 - placed.extent[0], x1 - placed.extent[0])
        return Grid.masked(placed.grid.samples[rows, cols], placed.grid.valid[rows, cols])

    return crop(a), crop(b)


def placed_ssim(a: PlacedGrid, b: PlacedGrid) -> float:
    """SSIM of two stitched grids over their shared canvas."""
    return ssim(*align_grids(a, b))


def _gradient_magnitude(g: Grid) -> Grid:
    filled = np.where(g.valid, g.samples, 0.0)
    gx = ndimage.sobel(filled, axis=1)
    gy = ndimage.sobel(filled, axis=0)
    valid = ndimage.binary_erosion(g.valid, structure=np.ones((3, 3)), border_value=0)
    return Grid.masked(np.hypot(gx, gy), valid)


def gradient_correlation(candidate: Grid, primary: Grid) -> float:
    """Pearson correlation of gradient magnitudes; 0 when either is constant."""
    ga, gb = _gradient_magnitude(candidate), _gradient_magnitude(primary)
    joint = ga.valid & gb.valid
    if joint.sum() < 2:
        return 0.0
    xa = ga.samples[joint] - ga.samples[joint].mean()
    xb = gb.samples[joint] - gb.samples[joint].mean()
    denom = float(np.sqrt((xa * xa).sum() * (xb * xb).sum()))
    if denom <= 0.0:
        return 0.0
    return float(np.clip((xa * xb).sum() / denom, -1.0, 1.0))


@dataclass(frozen=True)
class ChannelScore:
    channel: str
    mean_detected: float
    mean_matched: float
    mean_corr: float
    score: float
    pairs: int = 0
    mean_inliers: float = 0.0

    def to_report(self) -> ChannelReport:
        return ChannelReport(
            name=self.channel,
            mean_detected=self.mean_detected,
            pairs=self.pairs,
            mean_matched=self.mean_matched,
            mean_inliers=self.mean_inliers,
            mean_corr=self.mean_corr,
            score=self.score,
        )


@dataclass(frozen=True)
class ChannelEvidence:
    """Everything computed while evaluating one candidate channel."""

    channel: str
    grids: list[Grid]
    images: list[NDArray[np.uint8]]
    features: list[FeatureSet]
    graph: PairGraph

    def stats(self) -> ChannelReport:
        return feature_stats(self.features, self.graph, self.channel)


def channel_grids(
    stack: TileStack, channel: str, primary: str, options: PreprocessOptions | None = None
) -> list[Grid]:
    """Grids a channel contributes for feature detection.

    The primary channel is line-flattened and plane-corrected; ``deriv_x``
    is the x-derivative of that corrected primary; any other channel is used
    as measured.

    Raises:
        InputError: If the channel is missing from a tile
    """
    options = options or PreprocessOptions()
    if channel in (primary, RESERVED_CHANNEL):
        corrected = [
            preprocess_primary(g, options.flatten, options.flatten_method, options.plane)
            for g in stack.grids(primary)
        ]
        if channel == primary:
            return corrected
        return [derive_x(g, options.deriv_smooth) for g in corrected]
    return stack.grids(channel)


def evaluate_channel(
    stack: TileStack,
    channel: str,
    primary: str,
    preprocess: PreprocessOptions,
    detector: DetectorParams,
    matching: MatchParams,
    workers: int = 1,
) -> ChannelEvidence:
    """Detect on every tile of a channel and match all pairs."""
    grids = channel_grids(stack, channel, primary, preprocess)
    images = [normalize_u8(g) for g in grids]
    features = detect_all(list(zip(images, [g.valid for g in grids])), detector, channel, workers)
    hints = {tile.index: tile.origin_hint for tile in stack.tiles}
    graph = match_all(features, matching, workers, hints)
    logger.info(
        f"Channel '{channel}': {np.mean([len(f) for f in features]):.0f} keypoints/tile, "
        f"{len(graph.edges)} accepted pairs"
    )
    return ChannelEvidence(channel, grids, images, features, graph)


def _zscores(values: list[float]) -> FloatArray:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std())
    if std == 0.0:
        return np.zeros_like(arr)
    return (arr - arr.mean()) / std


def rank_channels(
    evidence: list[ChannelEvidence],
    primary_grids: list[Grid],
    weights: ScoreWeights | None = None,
) -> list[ChannelScore]:
    """Score candidates by z(matched) + z(detected) + z(corr), best first.

    Ties are broken by channel name.
    """
    weights = weights or ScoreWeights()
    stats = [ev.stats() for ev in evidence]
    corrs = [
        float(np.mean([gradient_correlation(c, p) for c, p in zip(ev.grids, primary_grids)]))
        for ev in evidence
    ]
    z_matched = _zscores([s.mean_matched for s in stats])
    z_detected = _zscores([s.mean_detected for s in stats])
    z_corr = _zscores(corrs)
    scores = [
        ChannelScore(
            channel=s.name,
            mean_detected=s.mean_detected,
            mean_matched=s.mean_matched,
            mean_corr=corrs[k],
            score=float(
                weights.matched * z_matched[k]
                + weights.detected * z_detected[k]
                + weights.corr * z_corr[k]
            ),
            pairs=s.pairs,
            mean_inliers=s.mean_inliers,
        )
        for k, s in enumerate(stats)
    ]
    return sorted(scores, key=lambda s: (-s.score, s.channel))


def channel_score(
    stack: TileStack,
    candidates: list[str],
    detector_params: DetectorParams,
    primary: str,
    matching: MatchParams | None = None,
    preprocess: PreprocessOptions | None = None,
    weights: ScoreWeights | None = None,
    workers: int = 1,
) -> tuple[list[ChannelScore], dict[str, ChannelEvidence]]:
    """Evaluate and rank candidate secondary channels.

    Returns:
        (ranking best first, evidence per candidate)

    Raises:
        InputError: If no candidate is given or a candidate is missing from a tile
    """
    if not candidates:
        raise InputError("channel scoring needs at least one candidate")
    matching = matching or MatchParams()
    preprocess = preprocess or PreprocessOptions()
    evidence = {
        name: evaluate_channel(stack, name, primary, preprocess, detector_params, matching, workers)
        for name in candidates
    }
    primary_grids = (
        evidence[primary].grids
        if primary in evidence
        else channel_grids(stack, primary, primary, preprocess)
    )
    ranking = rank_channels([evidence[name] for name in candidates], primary_grids, weights)
    return ranking, evidence


def _tile_corners(height: int, width: int) -> FloatArray:
    return np.array([[0.0, 0.0], [width, 0.0], [0.0, height], [width, height]])


def fit_gauge(src: FloatArray, dst: FloatArray) -> AffineTransform:
    """Least-absolute-deviation affine fit mapping ``src`` points onto ``dst``."""
    design = np.column_stack([src, np.ones(len(src))])
    weights = np.ones(len(src))
    sol = np.zeros((3, 2))
    for _ in range(GAUGE_IRLS_ROUNDS):
        root = np.sqrt(weights)[:, None]
        updated, *_ = np.linalg.lstsq(design * root, dst * root, rcond=None)
        resid = np.linalg.norm(design @ updated - dst, axis=1)
        weights = 1.0 / np.maximum(resid, GAUGE_IRLS_EPS)
        if np.max(np.abs(updated - sol)) < 1e-12:
            sol = updated
            break
        sol = updated
    return AffineTransform.from_matrix(sol.T)


def registration_error(
    layout: Layout,
    truth_poses: dict[int, AffineTransform],
    tile_dims: dict[int, tuple[int, int]],
) -> tuple[float, float]:
    """Mean and max corner error of member tiles against ground truth.

    Estimated corners are first mapped into the truth frame by the single
    affine gauge that best aligns the two pose sets.

    Raises:
        InputError: If a member tile has no truth pose
    """
    missing = [t for t in layout.member_tiles if t not in truth_poses]
    if missing:
        raise InputError(f"no ground truth for tiles {missing}")

    est_pts, true_pts = [], []
    for t in layout.member_tiles:
        corners = _tile_corners(*tile_dims[t])
        est_pts.append(layout.pose_of(t).apply(corners))
        true_pts.append(truth_poses[t].apply(corners))
    est = np.vstack(est_pts)
    true = np.vstack(true_pts)

    gauge = fit_gauge(est, true)
    dist = np.linalg.norm(gauge.apply(est) - true, axis=1).reshape(-1, 4)
    per_tile = dist.mean(axis=1)
    return float(per_tile.mean()), float(per_tile.max())
