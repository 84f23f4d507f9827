"""End-to-end bi-channel stitching.

Poses are estimated on the secondary channel (a measured channel, the
synthesized ``deriv_x`` or, as a last resort, the primary itself) and then
applied to the preprocessed primary channel, which is warped and blended
into the mosaic.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

from afm_stitch.config import AUTO_CHANNEL, PRIMARY_ALIAS, RunConfig
from afm_stitch.core.analytics import (
    ChannelEvidence,
    channel_grids,
    channel_score,
    evaluate_channel,
    placed_ssim,
    registration_error,
)
from afm_stitch.core.compose import Mosaic, compose_mosaic
from afm_stitch.core.exceptions import InputError, StitchImpossibleError
from afm_stitch.core.features import dump_features
from afm_stitch.core.matching import PairGraph
from afm_stitch.core.models import (
    RESERVED_CHANNEL,
    ChannelReport,
    DroppedTile,
    LayoutReport,
    MetricsReport,
    PairRecord,
    PoseRecord,
    StitchReport,
)
from afm_stitch.core.pose_graph import Layout, choose_reference, initial_poses, largest_component, refine_poses
from afm_stitch.core.synth import load_truth
from afm_stitch.core.tile_store import PlacedGrid, TileStack, load_mosaic, load_stack, save_outputs

logger = logging.getLogger(__name__)

StatusCallback = Callable[[str], None]

UPSAMPLED_SCALE_SPACE = "2x upsampled base octave"
# OpenCV always builds the upsampled octave; large tiles only drop its keypoints
APPROXIMATE_SCALE_SPACE = "native base octave approximated by dropping upsampled-octave keypoints"


@dataclass(frozen=True)
class StitchResult:
    mosaic: Mosaic
    report: StitchReport
    paths: dict[str, Path]


def candidate_channels(stack: TileStack, primary: str) -> list[str]:
    """Channels tried by automatic selection: measured ones, then deriv_x, then the primary."""
    measured = [c for c in stack.channels if c != primary]
    return [*measured, RESERVED_CHANNEL, primary]


def resolve_secondary(config: RunConfig, stack: TileStack) -> str | None:
    """Name of the feature channel, or None when it must be chosen automatically.

    Raises:
        InputError: If the primary or the requested secondary is unknown
    """
    if config.primary not in stack.channels:
        raise InputError(
            f"primary channel '{config.primary}' not in stack channels {stack.channels}"
        )
    if config.secondary == AUTO_CHANNEL:
        return None
    if config.direct:
        return config.primary
    if config.secondary == RESERVED_CHANNEL or config.secondary in stack.channels:
        return config.secondary
    raise InputError(
        f"secondary channel '{config.secondary}' not in stack channels {stack.channels} "
        f"(or '{RESERVED_CHANNEL}', '{AUTO_CHANNEL}', '{PRIMARY_ALIAS}')"
    )


def _dropped_reasons(graph: PairGraph, dropped: set[int]) -> list[DroppedTile]:
    with_edges = {e.tile_a for e in graph.edges} | {e.tile_b for e in graph.edges}
    return [
        DroppedTile(
            tile=t,
            reason=(
                "outside the largest connected component"
                if t in with_edges
                else "no accepted pair estimate"
            ),
        )
        for t in sorted(dropped)
    ]


def solve_layout(graph: PairGraph, config: RunConfig) -> Layout:
    """Largest component, spanning-tree initialization and global refinement.

    Raises:
        StitchImpossibleError: If no pair estimate was accepted
    """
    if not graph.edges:
        raise StitchImpossibleError("no pair estimate was accepted; nothing to stitch")
    members, dropped = largest_component(graph)
    reference = choose_reference(graph, members)
    start = initial_poses(graph, members)
    layout = refine_poses(start, graph, config.pose, reference)
    if dropped:
        logger.warning(f"{len(dropped)} tile(s) dropped: {sorted(dropped)}")
    return layout


def layout_report(layout: Layout, graph: PairGraph) -> LayoutReport:
    return LayoutReport(
        reference=layout.reference,
        members=layout.member_tiles,
        dropped=_dropped_reasons(graph, set(layout.dropped)),
        residual_rms_px=layout.residual_rms,
        poses=[PoseRecord(tile=p.tile_index, coefficients=p.transform.coefficients) for p in layout.poses],
    )


def run_stitch(config: RunConfig, status: StatusCallback | None = None) -> StitchResult:
    """Run the full pipeline and write mosaic, preview, layout and report.

    Args:
        config: Validated run configuration
        status: Optional callback receiving stage descriptions

    Returns:
        The mosaic, its report and the written paths

    Raises:
        InputError: Invalid input data or channel names
        StitchImpossibleError: If no pair estimate is accepted
        OutputError: If writing the outputs fails
    """

    def stage(message: str) -> None:
        logger.info(message)
        if status:
            status(message)

    stage(f"Loading {config.input}")
    stack = load_stack(config.input, config.workers)
    secondary = resolve_secondary(config, stack)

    channel_reports: list[ChannelReport]
    if secondary is None:
        stage("Scoring candidate channels")
        ranking, evidence_by_name = channel_score(
            stack,
            candidate_channels(stack, config.primary),
            config.detector,
            config.primary,
            matching=config.matching,
            preprocess=config.preprocess,
            weights=config.score_weights,
            workers=config.workers,
        )
        secondary = ranking[0].channel
        evidence: ChannelEvidence = evidence_by_name[secondary]
        channel_reports = [s.to_report() for s in ranking]
        logger.info(f"Automatic selection chose '{secondary}'")
    else:
        stage(f"Detecting and matching on '{secondary}'")
        evidence = evaluate_channel(
            stack,
            secondary,
            config.primary,
            config.preprocess,
            config.detector,
            config.matching,
            config.workers,
        )
        channel_reports = [evidence.stats()]

    if config.dump_features:
        feature_dir = config.out / "features"
        for fs, img in zip(evidence.features, evidence.images):
            dump_features(fs, img, feature_dir)

    graph = evidence.graph
    if not graph.edges:
        raise StitchImpossibleError(
            f"no pair estimate was accepted on channel '{secondary}'; nothing to stitch"
        )

    stage("Solving global poses")
    layout = solve_layout(graph, config)

    stage(f"Composing '{config.primary}' mosaic")
    primary_grids = channel_grids(stack, config.primary, config.primary, config.preprocess)
    grids = {tile.index: g for tile, g in zip(stack.tiles, primary_grids)}
    pixel_sizes = {t.pixel_size for t in stack.tiles if t.pixel_size is not None}
    mosaic = compose_mosaic(
        grids,
        layout,
        config.blend,
        config.primary,
        pixel_size=pixel_sizes.pop() if len(pixel_sizes) == 1 else None,
        workers=config.workers,
    )

    metrics = MetricsReport()
    if config.truth is not None:
        truth = load_truth(config.truth)
        mean_err, max_err = registration_error(layout, truth.true_poses, stack.tile_dims())
        metrics.reg_error_mean_px = mean_err
        metrics.reg_error_max_px = max_err
    if config.reference is not None:
        placed = PlacedGrid(mosaic.grid, mosaic.extent.as_tuple(), layout.reference)
        metrics.ssim = placed_ssim(placed, load_mosaic(config.reference))

    warnings = []
    if layout.dropped:
        warnings.append(
            f"{len(layout.dropped)} tile(s) dropped from the mosaic: {layout.dropped}"
        )

    height, width = stack.tiles[0].shape
    upsampled = all(fs.upsampled for fs in evidence.features)
    report = StitchReport(
        parameters=config.parameters(),
        channels=channel_reports,
        chosen_channel=secondary,
        layout=layout_report(layout, graph),
        pairs=[
            PairRecord(
                tile_a=e.tile_a,
                tile_b=e.tile_b,
                num_matches=e.num_matches,
                inliers=e.inlier_count,
                confidence=e.confidence,
            )
            for e in graph.edges
        ],
        metrics=metrics,
        detector={
            "implementation": "opencv-sift",
            "octaves": config.detector.resolved_octaves(height, width),
            "upsampled": upsampled,
            "scale_space": UPSAMPLED_SCALE_SPACE if upsampled else APPROXIMATE_SCALE_SPACE,
        },
        warnings=warnings,
    )

    stage(f"Writing outputs to {config.out}")
    paths = save_outputs(mosaic, report, config.out)
    return StitchResult(mosaic=mosaic, report=report, paths=paths)
