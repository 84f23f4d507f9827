"""Descriptor matching and robust pairwise affine estimation.

``match_pair`` keeps mutual nearest neighbours that pass the ratio test in
both directions. ``estimate_pair`` fits the affine transform mapping tile b
into tile a's frame with RANSAC over minimal 3-point samples followed by a
least-squares refit on the inliers. ``match_all`` runs both over every
unordered tile pair and keeps the accepted estimates as graph edges.

A pair is always estimated from its lower tile index, so swapping the
arguments of ``estimate_pair`` returns the exact inverse. On larger stacks
``match_all`` first screens every pair on the strongest keypoints of each
tile and fully matches each tile only against its best-scoring partners.
"""

import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations

import cv2
import numpy as np
from numpy.typing import NDArray

from afm_stitch.config import MatchParams
from afm_stitch.core.exceptions import DegenerateGeometryError
from afm_stitch.core.features import FeatureSet

logger = logging.getLogger(__name__)

MIN_PAIR_MATCHES = 4
DET_BOUNDS = (0.5, 2.0)
REFIT_ROUNDS = 10
RANSAC_BATCH = 64
# Twice the triangle area below which a minimal sample counts as collinear
COLLINEAR_EPS = 1e-6

FloatArray = NDArray[np.float64]


@dataclass(frozen=True)
class AffineTransform:
    """Planar affine map (x, y) -> (a11 x + a12 y + tx, a21 x + a22 y + ty)."""

    a11: float = 1.0
    a12: float = 0.0
    tx: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    ty: float = 0.0

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform":
        return cls(tx=float(tx), ty=float(ty))

    @classmethod
    def from_matrix(cls, m: FloatArray) -> "AffineTransform":
        """Build from a 2x3 or 3x3 matrix."""
        return cls(
            float(m[0, 0]), float(m[0, 1]), float(m[0, 2]),
            float(m[1, 0]), float(m[1, 1]), float(m[1, 2]),
        )

    @classmethod
    def from_coefficients(cls, c: tuple[float, ...] | list[float]) -> "AffineTransform":
        return cls(*(float(v) for v in c))

    @classmethod
    def fit(cls, src: FloatArray, dst: FloatArray) -> "AffineTransform":
        """Least-squares affine mapping ``src`` points onto ``dst`` points.

        Raises:
            DegenerateGeometryError: If fewer than 3 non-collinear points are given
        """
        design = np.column_stack([src, np.ones(len(src))])
        if len(src) < 3 or np.linalg.matrix_rank(design) < 3:
            raise DegenerateGeometryError("affine fit needs 3 non-collinear points")
        sol, *_ = np.linalg.lstsq(design, dst, rcond=None)
        return cls.from_matrix(sol.T)

    @property
    def matrix(self) -> FloatArray:
        return np.array(
            [[self.a11, self.a12, self.tx], [self.a21, self.a22, self.ty], [0.0, 0.0, 1.0]]
        )

    @property
    def coefficients(self) -> tuple[float, float, float, float, float, float]:
        return (self.a11, self.a12, self.tx, self.a21, self.a22, self.ty)

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    def apply(self, points: FloatArray) -> FloatArray:
        """Map an (n, 2) array of (x, y) points."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        x, y = pts[:, 0], pts[:, 1]
        return np.column_stack(
            [self.a11 * x + self.a12 * y + self.tx, self.a21 * x + self.a22 * y + self.ty]
        )

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return AffineTransform.from_matrix(self.matrix @ other.matrix)

    def inverse(self) -> "AffineTransform":
        """Raises DegenerateGeometryError for a singular linear part."""
        if abs(self.det) < 1e-12:
            raise DegenerateGeometryError(f"singular transform (det={self.det:.3g})")
        return AffineTransform.from_matrix(np.linalg.inv(self.matrix))


@dataclass(frozen=True)
class Match:
    idx_a: int
    idx_b: int
    distance: float


@dataclass(frozen=True)
class PairEstimate:
    """An accepted transform between two tiles.

    Attributes:
        tile_a: Tile whose frame the transform maps into
        tile_b: Tile whose coordinates the transform maps from
        transform: Affine map from tile_b pixels into tile_a pixels
        inliers: Matches consistent with the transform
        num_matches: Matches fed to the estimator
        confidence: inliers / (8 + 0.3 * num_matches)
        points_a: (k, 2) inlier positions in tile_a
        points_b: (k, 2) inlier positions in tile_b
    """

    tile_a: int
    tile_b: int
    transform: AffineTransform
    inliers: list[Match]
    num_matches: int
    confidence: float
    points_a: FloatArray = field(repr=False)
    points_b: FloatArray = field(repr=False)

    @property
    def inlier_count(self) -> int:
        return len(self.inliers)

    def swapped(self) -> "PairEstimate":
        """The same estimate seen from tile_b: inverse transform, sides exchanged."""
        return PairEstimate(
            tile_a=self.tile_b,
            tile_b=self.tile_a,
            transform=self.transform.inverse(),
            inliers=[Match(m.idx_b, m.idx_a, m.distance) for m in self.inliers],
            num_matches=self.num_matches,
            confidence=self.confidence,
            points_a=self.points_b,
            points_b=self.points_a,
        )


@dataclass(frozen=True)
class PairGraph:
    """Tiles as nodes, accepted pair estimates as edges."""

    nodes: list[int]
    edges: list[PairEstimate]

    def __post_init__(self) -> None:
        seen: set[tuple[int, int]] = set()
        for edge in self.edges:
            if edge.tile_a == edge.tile_b:
                raise ValueError(f"self edge on tile {edge.tile_a}")
            key = (min(edge.tile_a, edge.tile_b), max(edge.tile_a, edge.tile_b))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)

    def restricted(self, members: set[int]) -> "PairGraph":
        """Subgraph induced by ``members``."""
        return PairGraph(
            nodes=[n for n in self.nodes if n in members],
            edges=[e for e in self.edges if e.tile_a in members and e.tile_b in members],
        )


def _pairwise_distances(a: FloatArray, b: FloatArray) -> FloatArray:
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.clip(sq, 0.0, None))


def _two_nearest(dist: FloatArray) -> tuple[NDArray[np.intp], FloatArray, FloatArray]:
    rows = np.arange(dist.shape[0])
    if dist.shape[1] == 1:
        return np.zeros(dist.shape[0], dtype=np.intp), dist[:, 0], np.full(dist.shape[0], np.inf)
    two = np.argpartition(dist, 1, axis=1)[:, :2]
    d = dist[rows[:, None], two]
    swap = d[:, 1] < d[:, 0]
    first = np.where(swap, two[:, 1], two[:, 0])
    d1 = np.where(swap, d[:, 1], d[:, 0])
    d2 = np.where(swap, d[:, 0], d[:, 1])
    return first, d1, d2


def match_pair(fa: FeatureSet, fb: FeatureSet, ratio: float = 0.75) -> list[Match]:
    """Mutual nearest-neighbour matches passing the ratio test both ways.

    Returns:
        Matches sorted by (distance, idx_a, idx_b)
    """
    if len(fa) == 0 or len(fb) == 0:
        return []

    dist = _pairwise_distances(fa.descriptors, fb.descriptors)
    nn_ab, d1_ab, d2_ab = _two_nearest(dist)
    nn_ba, d1_ba, d2_ba = _two_nearest(dist.T)

    pass_ab = d1_ab < ratio * d2_ab
    pass_ba = d1_ba < ratio * d2_ba
    idx_a = np.flatnonzero(pass_ab)
    idx_b = nn_ab[idx_a]
    mutual = (nn_ba[idx_b] == idx_a) & pass_ba[idx_b]
    idx_a, idx_b = idx_a[mutual], idx_b[mutual]

    exact = np.linalg.norm(fa.descriptors[idx_a] - fb.descriptors[idx_b], axis=1)
    order = np.lexsort((idx_b, idx_a, exact))
    return [Match(int(idx_a[k]), int(idx_b[k]), float(exact[k])) for k in order]


def _draw_triples(rng: np.random.Generator, m: int, count: int) -> NDArray[np.intp]:
    # Uniform 3-subsets without replacement
    a = rng.integers(0, m, count)
    b = rng.integers(0, m - 1, count)
    b = b + (b >= a)
    c = rng.integers(0, m - 2, count)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    c = c + (c >= lo)
    c = c + (c >= hi)
    return np.column_stack([a, b, c])


def _twice_area(p: FloatArray) -> FloatArray:
    u = p[:, 1] - p[:, 0]
    v = p[:, 2] - p[:, 0]
    return np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])


def _reprojection_errors(t: AffineTransform, pb: FloatArray, pa: FloatArray) -> FloatArray:
    return np.linalg.norm(t.apply(pb) - pa, axis=1)


def _ransac(
    pa: FloatArray, pb: FloatArray, params: MatchParams, rng: np.random.Generator
) -> NDArray[np.bool_] | None:
    m = len(pa)
    best: NDArray[np.bool_] | None = None
    best_count = 0
    done = 0
    while done < params.max_iterations:
        count = min(RANSAC_BATCH, params.max_iterations - done)
        triples = _draw_triples(rng, m, count)
        done += count
        src, dst = pb[triples], pa[triples]
        # Collinear samples are skipped; they still consume an iteration
        ok = (_twice_area(src) > COLLINEAR_EPS) & (_twice_area(dst) > COLLINEAR_EPS)
        if not ok.any():
            continue
        design = np.concatenate([src[ok], np.ones((int(ok.sum()), 3, 1))], axis=2)
        sol = np.linalg.solve(design, dst[ok])
        mapped = np.einsum("nk,skj->snj", np.column_stack([pb, np.ones(m)]), sol)
        inlier_sets = np.linalg.norm(mapped - pa[None], axis=2) < params.reproj_px
        for inliers in inlier_sets:
            n = int(inliers.sum())
            if n > best_count:
                best, best_count = inliers, n
            if best_count >= params.early_exit_ratio * m:
                return best
    return best


def _overlap_fraction(
    transform: AffineTransform, shape_a: tuple[int, int], shape_b: tuple[int, int]
) -> float:
    """Share of the smaller tile covered by both footprints under ``transform``."""

    def rect(shape: tuple[int, int]) -> FloatArray:
        h, w = shape
        return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])

    area, _ = cv2.intersectConvexConvex(
        rect(shape_a).astype(np.float32), transform.apply(rect(shape_b)).astype(np.float32)
    )
    smaller = min(shape_a[0] * shape_a[1], shape_b[0] * shape_b[1])
    return float(area) / smaller


def estimate_pair(
    fa: FeatureSet,
    fb: FeatureSet,
    matches: list[Match],
    rng_seed: int,
    params: MatchParams | None = None,
) -> PairEstimate | None:
    """Robustly estimate the affine transform mapping tile b into tile a.

    The fit always runs from the lower tile index to the higher one, seeded
    from ``(rng_seed, lower, higher)``; a call with the tiles the other way
    round returns the swapped estimate, so both orientations are exact
    inverses of each other. Matches are sampled in (distance, index) order,
    whatever order they are passed in.

    Returns:
        The accepted estimate, or None when the pair is rejected
    """
    if fa.tile_index > fb.tile_index:
        flipped = [Match(mt.idx_b, mt.idx_a, mt.distance) for mt in matches]
        canonical = estimate_pair(fb, fa, flipped, rng_seed, params)
        return None if canonical is None else canonical.swapped()

    params = params or MatchParams()
    matches = sorted(matches, key=lambda mt: (mt.distance, mt.idx_a, mt.idx_b))
    m = len(matches)
    if m < MIN_PAIR_MATCHES:
        return None

    ia = np.array([mt.idx_a for mt in matches], dtype=np.intp)
    ib = np.array([mt.idx_b for mt in matches], dtype=np.intp)
    pa, pb = fa.points[ia], fb.points[ib]

    lo, hi = sorted((fa.tile_index, fb.tile_index))
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, lo, hi]))
    inliers = _ransac(pa, pb, params, rng)
    if inliers is None or inliers.sum() < 3:
        return None

    transform: AffineTransform | None = None
    for _ in range(REFIT_ROUNDS):
        try:
            candidate = AffineTransform.fit(pb[inliers], pa[inliers])
        except DegenerateGeometryError:
            break
        transform = candidate
        refreshed = _reprojection_errors(transform, pb, pa) < params.reproj_px
        if np.array_equal(refreshed, inliers):
            break
        inliers = refreshed
        if inliers.sum() < 3:
            break
    if transform is None:
        return None

    inliers = _reprojection_errors(transform, pb, pa) < params.reproj_px
    n_in = int(inliers.sum())
    confidence = n_in / (8.0 + 0.3 * m)
    det = transform.det
    if n_in < MIN_PAIR_MATCHES or confidence < params.confidence or not (
        DET_BOUNDS[0] <= det <= DET_BOUNDS[1]
    ):
        logger.debug(
            f"Pair ({fa.tile_index}, {fb.tile_index}) rejected: {n_in}/{m} inliers, "
            f"confidence {confidence:.2f}, det {det:.3f}"
        )
        return None
    # Corner-only contacts of diagonal grid neighbours fall below the overlap floor
    if fa.shape is not None and fb.shape is not None and params.min_overlap > 0:
        overlap = _overlap_fraction(transform, fa.shape, fb.shape)
        if overlap < params.min_overlap:
            logger.debug(
                f"Pair ({fa.tile_index}, {fb.tile_index}) rejected: "
                f"footprint overlap {overlap:.3f} below {params.min_overlap}"
            )
            return None

    keep = np.flatnonzero(inliers)
    return PairEstimate(
        tile_a=fa.tile_index,
        tile_b=fb.tile_index,
        transform=transform,
        inliers=[matches[k] for k in keep],
        num_matches=m,
        confidence=confidence,
        points_a=pa[keep],
        points_b=pb[keep],
    )


def _hinted_neighbours(
    a: tuple[float, float] | None, b: tuple[float, float] | None
) -> bool:
    if a is None or b is None:
        return True
    return abs(a[0] - b[0]) <= 1.0 and abs(a[1] - b[1]) <= 1.0


def _strongest(fs: FeatureSet, count: int) -> FeatureSet:
    # Detection orders keypoints by response, strongest first
    return FeatureSet(
        tile_index=fs.tile_index,
        channel=fs.channel,
        keypoints=fs.keypoints[:count],
        descriptors=fs.descriptors[:count],
        upsampled=fs.upsampled,
        shape=fs.shape,
    )


def screen_pairs(
    pairs: list[tuple[FeatureSet, FeatureSet]], params: MatchParams, workers: int = 1
) -> list[tuple[FeatureSet, FeatureSet]]:
    """Keep, for every tile, the candidate partners sharing the most strong matches.

    Each pair is scored by the mutual ratio-test matches among the
    ``params.screen_features`` strongest keypoints of both tiles. A pair
    survives when it is among the ``params.max_candidates`` best partners of
    either of its tiles; ties go to the lower partner index. Nothing is
    screened out while no tile has more candidates than that.
    """
    partners: dict[int, list[int]] = defaultdict(list)
    for fa, fb in pairs:
        partners[fa.tile_index].append(fb.tile_index)
        partners[fb.tile_index].append(fa.tile_index)
    if params.max_candidates == 0 or all(
        len(others) <= params.max_candidates for others in partners.values()
    ):
        return pairs

    subsets = {
        fs.tile_index: _strongest(fs, params.screen_features)
        for pair in pairs
        for fs in pair
    }

    def score(pair: tuple[FeatureSet, FeatureSet]) -> int:
        fa, fb = pair
        return len(match_pair(subsets[fa.tile_index], subsets[fb.tile_index], params.ratio))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        scores = list(executor.map(score, pairs))

    ranked: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for (fa, fb), n in zip(pairs, scores):
        ranked[fa.tile_index].append((n, fb.tile_index))
        ranked[fb.tile_index].append((n, fa.tile_index))
    keep: set[tuple[int, int]] = set()
    for tile, scored in ranked.items():
        for _, other in sorted(scored, key=lambda s: (-s[0], s[1]))[: params.max_candidates]:
            keep.add((min(tile, other), max(tile, other)))

    kept = [(fa, fb) for fa, fb in pairs if (fa.tile_index, fb.tile_index) in keep]
    logger.info(f"Screening kept {len(kept)} of {len(pairs)} candidate pairs")
    return kept


def match_all(
    features: list[FeatureSet],
    params: MatchParams | None = None,
    workers: int = 1,
    hints: dict[int, tuple[float, float] | None] | None = None,
) -> PairGraph:
    """Match candidate tile pairs and keep the accepted estimates.

    Args:
        features: One feature set per tile
        params: Matching settings
        workers: Threads used for pairs
        hints: Tile -> origin hint; only used when ``params.grid_hint`` is set

    Returns:
        Graph with edges in canonical (tile_a, tile_b) order, tile_a < tile_b
    """
    params = params or MatchParams()
    ordered = sorted(features, key=lambda fs: fs.tile_index)
    pairs = list(combinations(ordered, 2))
    if params.grid_hint and hints:
        pairs = [
            (fa, fb)
            for fa, fb in pairs
            if _hinted_neighbours(hints.get(fa.tile_index), hints.get(fb.tile_index))
        ]
    pairs = screen_pairs(pairs, params, workers)

    def run(pair: tuple[FeatureSet, FeatureSet]) -> PairEstimate | None:
        fa, fb = pair
        matches = match_pair(fa, fb, params.ratio)
        return estimate_pair(fa, fb, matches, params.seed, params)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        results = list(executor.map(run, pairs))

    edges = [est for est in results if est is not None]
    logger.info(f"Accepted {len(edges)} of {len(pairs)} tile pairs")
    return PairGraph(nodes=[fs.tile_index for fs in ordered], edges=edges)
