"""Global tile poses from the pair graph.

Poses are initialized along the maximum-confidence spanning tree of the
largest connected component and then refined jointly by linear least
squares over every inlier correspondence, with the reference tile frozen at
the identity.
"""

import logging
from dataclasses import dataclass, field
from typing import NoReturn

import numpy as np
from numpy.typing import NDArray
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve

from afm_stitch.config import PoseModel, PoseOptions
from afm_stitch.core.exceptions import DegenerateGeometryError
from afm_stitch.core.matching import AffineTransform, PairGraph

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

# Square root of machine epsilon; singular values below this share of the largest are null
RANK_RTOL = float(np.sqrt(np.finfo(np.float64).eps))
HUBER_MAX_ROUNDS = 50
HUBER_TOL = 1e-10


@dataclass(frozen=True)
class GlobalPose:
    """Transform from tile pixels into mosaic (reference tile) coordinates."""

    tile_index: int
    transform: AffineTransform


@dataclass(frozen=True)
class Layout:
    """Solved poses of the stitched tiles.

    Attributes:
        poses: One pose per member tile, sorted by tile index
        member_tiles: Tiles of the largest connected component
        residual_rms: RMS correspondence residual in pixels
        reference: Tile frozen at the identity
        dropped: Tiles outside the component
    """

    poses: list[GlobalPose]
    member_tiles: list[int]
    residual_rms: float
    reference: int
    dropped: list[int] = field(default_factory=list)

    def pose_of(self, tile: int) -> AffineTransform:
        for pose in self.poses:
            if pose.tile_index == tile:
                return pose.transform
        raise KeyError(tile)

    def as_dict(self) -> dict[int, AffineTransform]:
        return {p.tile_index: p.transform for p in self.poses}


def _adjacency(g: PairGraph, weights: list[float] | None = None) -> sparse.csr_matrix:
    pos = {node: k for k, node in enumerate(g.nodes)}
    n = len(g.nodes)
    if not g.edges:
        return sparse.csr_matrix((n, n))
    rows = [pos[e.tile_a] for e in g.edges]
    cols = [pos[e.tile_b] for e in g.edges]
    data = weights if weights is not None else [1.0] * len(g.edges)
    return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


def largest_component(g: PairGraph) -> tuple[set[int], set[int]]:
    """Split nodes into the largest connected component and the rest.

    Equal-size components are ordered by their smallest tile index.

    Returns:
        (members, dropped)
    """
    if not g.nodes:
        return set(), set()
    n_comp, labels = csgraph.connected_components(_adjacency(g), directed=False)
    groups: list[list[int]] = [[] for _ in range(n_comp)]
    for node, label in zip(g.nodes, labels):
        groups[label].append(node)
    best = min(groups, key=lambda grp: (-len(grp), min(grp)))
    members = set(best)
    return members, set(g.nodes) - members


def choose_reference(g: PairGraph, members: set[int]) -> int:
    """Member with the highest total edge confidence; ties go to the lowest index."""
    totals = {m: 0.0 for m in members}
    for e in g.edges:
        if e.tile_a in members and e.tile_b in members:
            totals[e.tile_a] += e.confidence
            totals[e.tile_b] += e.confidence
    return min(totals, key=lambda t: (-totals[t], t))


def initial_poses(g: PairGraph, members: set[int]) -> list[GlobalPose]:
    """Compose pair transforms along the maximum-confidence spanning tree.

    Returns:
        Poses sorted by tile index; the reference tile gets the identity

    Raises:
        DegenerateGeometryError: If the members are not connected
    """
    sub = g.restricted(members)
    reference = choose_reference(sub, members)
    if len(sub.nodes) == 1:
        return [GlobalPose(reference, AffineTransform.identity())]

    top = max((e.confidence for e in sub.edges), default=0.0)
    # Minimum spanning tree over inverted confidences is the maximum-confidence tree
    tree = csgraph.minimum_spanning_tree(
        _adjacency(sub, [top + 1.0 - e.confidence for e in sub.edges])
    )
    pos = {node: k for k, node in enumerate(sub.nodes)}
    order, predecessors = csgraph.breadth_first_order(
        tree, pos[reference], directed=False, return_predecessors=True
    )
    if len(order) != len(sub.nodes):
        reached = {sub.nodes[k] for k in order}
        raise DegenerateGeometryError(
            "member tiles are not connected", tiles=sorted(members - reached)
        )

    by_pair = {(e.tile_a, e.tile_b): e.transform for e in sub.edges}
    poses = {reference: AffineTransform.identity()}
    for k in order[1:]:
        child = sub.nodes[k]
        parent = sub.nodes[predecessors[k]]
        if (parent, child) in by_pair:
            # Edge maps the child (tile_b) into the parent (tile_a)
            step = by_pair[(parent, child)]
        else:
            step = by_pair[(child, parent)].inverse()
        poses[child] = poses[parent].compose(step)
    return [GlobalPose(t, poses[t]) for t in sorted(poses)]


class PoseProblem:
    """Linear least-squares system over the free pose parameters.

    Residuals are ``T_a(p) - T_b(q)`` for every inlier correspondence (p, q)
    of every edge. Each free tile owns 6 (affine) or 4 (similarity)
    consecutive unknowns; the reference tile is fixed at the identity.
    """

    def __init__(self, g: PairGraph, members: set[int], reference: int, model: PoseModel):
        self.model = model
        self.reference = reference
        self.free = sorted(members - {reference})
        self.width = 6 if model is PoseModel.AFFINE else 4
        self._slot = {t: k * self.width for k, t in enumerate(self.free)}
        self.edges = [e for e in g.edges if e.tile_a in members and e.tile_b in members]
        self.A, self.rhs = self._assemble()
        norms = np.sqrt(np.asarray(self.A.multiply(self.A).sum(axis=0)).ravel())
        self._scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        self._rank_checked = False
        self.n_correspondences = self.rhs.size // 2

    @property
    def size(self) -> int:
        return len(self.free) * self.width

    def _tile_block(self, pts: FloatArray) -> tuple[list[FloatArray], list[FloatArray]]:
        """Per-parameter coefficients of the x and y residual rows."""
        x, y = pts[:, 0], pts[:, 1]
        one, zero = np.ones(len(pts)), np.zeros(len(pts))
        if self.model is PoseModel.AFFINE:
            return [x, y, one, zero, zero, zero], [zero, zero, zero, x, y, one]
        # [[a, -b, tx], [b, a, ty]]
        return [x, -y, one, zero], [y, x, zero, one]

    def _assemble(self) -> tuple[sparse.csr_matrix, FloatArray]:
        rows: list[NDArray[np.intp]] = []
        cols: list[NDArray[np.intp]] = []
        vals: list[FloatArray] = []
        rhs_parts: list[FloatArray] = []
        offset = 0
        for e in self.edges:
            k = len(e.points_a)
            rx = offset + 2 * np.arange(k)
            ry = rx + 1
            rhs = np.zeros(2 * k)
            for tile, pts, sign in ((e.tile_a, e.points_a, 1.0), (e.tile_b, e.points_b, -1.0)):
                if tile == self.reference:
                    rhs[0::2] -= sign * pts[:, 0]
                    rhs[1::2] -= sign * pts[:, 1]
                    continue
                base = self._slot[tile]
                cx, cy = self._tile_block(pts)
                for p in range(self.width):
                    for r, coef in ((rx, cx[p]), (ry, cy[p])):
                        nz = coef != 0
                        if nz.any():
                            rows.append(r[nz])
                            cols.append(np.full(int(nz.sum()), base + p))
                            vals.append(sign * coef[nz])
            rhs_parts.append(rhs)
            offset += 2 * k

        n_rows = offset
        if rows:
            matrix = sparse.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(n_rows, self.size),
            )
        else:
            matrix = sparse.csr_matrix((n_rows, self.size))
        rhs_all = np.concatenate(rhs_parts) if rhs_parts else np.zeros(0)
        return matrix, rhs_all

    def to_vector(self, poses: dict[int, AffineTransform]) -> FloatArray:
        x = np.zeros(self.size)
        for t in self.free:
            c = poses[t].coefficients
            s = self._slot[t]
            if self.model is PoseModel.AFFINE:
                x[s : s + 6] = c
            else:
                a11, a12, tx, a21, a22, ty = c
                x[s : s + 4] = ((a11 + a22) / 2, (a21 - a12) / 2, tx, ty)
        return x

    def from_vector(self, x: FloatArray) -> dict[int, AffineTransform]:
        poses = {self.reference: AffineTransform.identity()}
        for t in self.free:
            s = self._slot[t]
            if self.model is PoseModel.AFFINE:
                poses[t] = AffineTransform.from_coefficients(x[s : s + 6].tolist())
            else:
                a, b, tx, ty = x[s : s + 4]
                poses[t] = AffineTransform(a, -b, tx, b, a, ty)
        return poses

    def residuals(self, x: FloatArray) -> FloatArray:
        return self.A @ x - self.rhs

    def cost(self, x: FloatArray) -> float:
        r = self.residuals(x)
        return float(r @ r)

    def gradient(self, x: FloatArray) -> FloatArray:
        return 2.0 * (self.A.T @ self.residuals(x))

    def _check_rank(self) -> None:
        """Raise when the column-equilibrated design matrix is rank deficient.

        A direction counts as unconstrained when its singular value falls
        below ``RANK_RTOL`` of the largest one.
        """
        if self.size == 0 or self._rank_checked:
            return
        unused = self._scale == 0
        if unused.any():
            self._raise_unconstrained(np.flatnonzero(unused))
        scaled = (self.A @ sparse.diags(self._scale)).toarray()
        # R shares its singular values and right singular vectors with A
        r = np.linalg.qr(scaled, mode="r") if scaled.shape[0] > scaled.shape[1] else scaled
        _, sigma, vt = np.linalg.svd(r)
        sigma = np.concatenate([sigma, np.zeros(self.size - sigma.size)])
        null = sigma <= RANK_RTOL * float(sigma.max(initial=0.0))
        if null.any():
            self._raise_unconstrained(np.flatnonzero(np.abs(vt[null]).max(axis=0) > 1e-6))
        self._rank_checked = True

    def _raise_unconstrained(self, columns: NDArray[np.intp]) -> NoReturn:
        tiles = sorted({self.free[k // self.width] for k in columns})
        raise DegenerateGeometryError(
            "pose system is rank deficient; correspondences do not constrain every tile",
            tiles=tiles,
        )

    def solve(self, weights: FloatArray | None = None) -> FloatArray:
        """Solve the (optionally row-weighted) normal equations.

        Unknowns are equilibrated by column norm before the sparse solve, so
        translations and linear coefficients share one scale.

        Raises:
            DegenerateGeometryError: Naming the under-constrained tiles
        """
        if self.size == 0:
            return np.zeros(0)
        self._check_rank()
        w = np.ones(self.rhs.size) if weights is None else weights
        scaled = (self.A @ sparse.diags(self._scale)).tocsr()
        normal = (scaled.T @ sparse.diags(w) @ scaled).tocsc()
        y = spsolve(normal, scaled.T @ (w * self.rhs))
        return self._scale * np.atleast_1d(np.asarray(y, dtype=np.float64))

    def solve_huber(self, delta: float) -> FloatArray:
        """Iteratively reweighted least squares under a Huber loss on point residuals."""
        x = self.solve()
        for _ in range(HUBER_MAX_ROUNDS):
            r = self.residuals(x).reshape(-1, 2)
            norms = np.linalg.norm(r, axis=1)
            w_pt = np.where(norms <= delta, 1.0, delta / np.maximum(norms, delta))
            updated = self.solve(np.repeat(w_pt, 2))
            step = float(np.max(np.abs(updated - x))) if x.size else 0.0
            x = updated
            if step < HUBER_TOL:
                break
        return x

    def residual_rms(self, x: FloatArray) -> float:
        if self.n_correspondences == 0:
            return 0.0
        return float(np.sqrt(self.cost(x) / self.n_correspondences))


def refine_poses(
    initial: list[GlobalPose],
    g: PairGraph,
    options: PoseOptions | None = None,
    reference: int | None = None,
) -> Layout:
    """Jointly refine the poses of the tiles covered by ``initial``.

    Args:
        initial: Starting poses; their tiles define the members
        g: Pair graph holding the inlier correspondences
        options: Pose model and optional Huber threshold
        reference: Frozen tile; defaults to the member with the highest total confidence

    Returns:
        Refined layout

    Raises:
        DegenerateGeometryError: If the system does not constrain every tile
    """
    options = options or PoseOptions()
    members = {p.tile_index for p in initial}
    if reference is None:
        reference = choose_reference(g, members)
    dropped = sorted(set(g.nodes) - members)

    problem = PoseProblem(g, members, reference, options.model)
    start = problem.to_vector({p.tile_index: p.transform for p in initial})
    if options.huber_delta is not None:
        x = problem.solve_huber(options.huber_delta)
    else:
        x = problem.solve()

    rms = problem.residual_rms(x)
    logger.info(
        f"Refined {len(members)} poses ({options.model.value}): "
        f"cost {problem.cost(start):.4g} -> {problem.cost(x):.4g}, rms {rms:.3f} px"
    )
    poses = problem.from_vector(x)
    return Layout(
        poses=[GlobalPose(t, poses[t]) for t in sorted(poses)],
        member_tiles=sorted(members),
        residual_rms=rms,
        reference=reference,
        dropped=dropped,
    )
