"""Tests for feature statistics, quality metrics and channel scoring."""

import math

import numpy as np
import pytest

from afm_stitch.config import PreprocessOptions
from afm_stitch.core.analytics import (
    ChannelEvidence,
    align_grids,
    channel_grids,
    feature_stats,
    fit_gauge,
    gradient_correlation,
    placed_ssim,
    rank_channels,
    registration_error,
    ssim,
)
from afm_stitch.core.exceptions import InputError
from afm_stitch.core.matching import AffineTransform, PairGraph
from afm_stitch.core.pose_graph import GlobalPose, Layout
from afm_stitch.core.preprocess import Grid, derive_x, preprocess_primary
from afm_stitch.core.tile_store import PlacedGrid
from tests.helpers import exact_edge, make_features, unit_descriptors


@pytest.fixture
def surface(textured_surface) -> Grid:
    return Grid.from_array(textured_surface[:64, :64])


class TestSsim:
    """Tests for structural similarity."""

    def test_identical(self, surface):
        """Test a grid is perfectly similar to itself."""
        assert ssim(surface, surface) == pytest.approx(1.0)

    def test_symmetric_and_below_one(self, surface):
        """Test noise lowers the score symmetrically."""
        rng = np.random.default_rng(1)
        noisy = Grid.from_array(surface.samples + rng.normal(0.0, 5.0, surface.shape))
        forward = ssim(surface, noisy)
        assert forward < 0.95
        assert forward == ssim(noisy, surface)

    def test_only_joint_pixels_count(self, surface):
        """Test differences on pixels invalid in one grid are ignored."""
        other = surface.samples.copy()
        other[:, :20] += 1000.0
        valid = np.ones(surface.shape, dtype=bool)
        valid[:, :20] = False
        assert ssim(surface, Grid.masked(other, valid)) == pytest.approx(1.0)

    def test_tiny_overlap_single_window(self):
        """Test fewer pixels than one window still compare."""
        g = Grid.from_array(np.arange(25.0).reshape(5, 5))
        assert ssim(g, g) == pytest.approx(1.0)

    def test_shape_mismatch(self, surface):
        """Test grids of different shapes cannot be compared."""
        with pytest.raises(InputError):
            ssim(surface, Grid.from_array(np.zeros((8, 8))))

    def test_no_joint_pixels(self):
        """Test disjoint validity raises InputError."""
        a = np.full((8, 8), np.nan)
        b = np.full((8, 8), np.nan)
        a[:, :4] = 1.0
        b[:, 4:] = 1.0
        with pytest.raises(InputError):
            ssim(Grid.from_array(a), Grid.from_array(b))

    def test_constant_shift_lowers_score(self, surface):
        """Test a larger constant shift gives a strictly lower score."""
        positive = Grid.from_array(surface.samples - surface.samples.min() + 10.0)
        scores = [
            ssim(positive, Grid.from_array(positive.samples + shift))
            for shift in (0.0, 0.5, 1.0, 2.0, 5.0)
        ]
        assert scores[0] == pytest.approx(1.0)
        assert all(later < earlier for earlier, later in zip(scores, scores[1:]))

    def test_independent_noise_is_dissimilar(self):
        """Test unrelated random grids score near zero over many seeds."""
        for seed in range(20):
            rng_a, rng_b = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
            a = Grid.from_array(rng_a.normal(size=(64, 64)))
            b = Grid.from_array(rng_b.normal(size=(64, 64)))
            assert abs(ssim(a, b)) < 0.2


class TestPlacedSsim:
    """Tests for comparing mosaics on their shared canvas."""

    def test_offset_extents_are_aligned(self, surface):
        """Test mosaics covering different parts of one frame compare on the overlap."""
        left = PlacedGrid(Grid.from_array(surface.samples[:, :40]), (0, 0, 40, 64), 0)
        right = PlacedGrid(Grid.from_array(surface.samples[:, 24:]), (24, 0, 40, 64), 0)
        a, b = align_grids(left, right)
        assert a.shape == b.shape == (64, 16)
        assert np.array_equal(a.samples, surface.samples[:, 24:40])
        assert placed_ssim(left, right) == pytest.approx(1.0)

    def test_misaligned_content_scores_lower(self, surface):
        """Test the same pixels placed at the wrong offset are less similar."""
        left = PlacedGrid(Grid.from_array(surface.samples[:, :40]), (0, 0, 40, 64), 0)
        shifted = PlacedGrid(Grid.from_array(surface.samples[:, 24:]), (14, 0, 40, 64), 0)
        assert placed_ssim(left, shifted) < 0.9

    def test_different_reference_tiles(self, surface):
        """Test mosaics in different tile frames cannot be compared."""
        a = PlacedGrid(surface, (0, 0, 64, 64), 0)
        b = PlacedGrid(surface, (0, 0, 64, 64), 3)
        with pytest.raises(InputError, match="different reference tiles"):
            placed_ssim(a, b)

    def test_disjoint_extents(self, surface):
        """Test mosaics that do not overlap cannot be compared."""
        a = PlacedGrid(surface, (0, 0, 64, 64), 0)
        b = PlacedGrid(surface, (64, 0, 64, 64), 0)
        with pytest.raises(InputError, match="do not overlap"):
            placed_ssim(a, b)

    def test_extent_must_fit_grid(self, surface):
        """Test a grid whose shape disagrees with its extent is rejected."""
        a = PlacedGrid(surface, (0, 0, 64, 64), 0)
        b = PlacedGrid(surface, (0, 0, 60, 64), 0)
        with pytest.raises(InputError, match="does not fill"):
            align_grids(a, b)


class TestGradientCorrelation:
    """Tests for the gradient-magnitude correlation."""

    def test_self_correlation(self, surface):
        """Test a grid correlates perfectly with itself."""
        assert gradient_correlation(surface, surface) == pytest.approx(1.0)

    def test_scale_invariant(self, surface):
        """Test rescaling a channel keeps the correlation."""
        scaled = Grid.from_array(surface.samples * 3.0 + 7.0)
        assert gradient_correlation(scaled, surface) == pytest.approx(1.0)

    def test_constant_is_zero(self, surface):
        """Test a constant channel has zero correlation."""
        flat = Grid.from_array(np.full(surface.shape, 2.0))
        assert gradient_correlation(flat, surface) == 0.0


class TestFeatureStats:
    """Tests for per-channel statistics."""

    def test_counts(self, tile_points):
        """Test means over tiles and accepted pairs."""
        features = [
            make_features(0, tile_points, unit_descriptors(40, seed=1)),
            make_features(1, tile_points[:20], unit_descriptors(20, seed=2)),
        ]
        graph = PairGraph([0, 1], [exact_edge(0, 1, AffineTransform.identity(), tile_points[:10])])
        report = feature_stats(features, graph, "amplitude")
        assert report.name == "amplitude"
        assert report.mean_detected == pytest.approx(30.0)
        assert report.pairs == 1
        assert report.mean_matched == pytest.approx(10.0)
        assert report.mean_inliers == pytest.approx(10.0)

    def test_no_pairs(self, tile_points):
        """Test a channel without accepted pairs reports zeros."""
        features = [make_features(0, tile_points, unit_descriptors(40, seed=1))]
        report = feature_stats(features, PairGraph([0], []))
        assert report.name == "amplitude"
        assert report.pairs == 0
        assert report.mean_matched == 0.0


class TestRankChannels:
    """Tests for z-score ranking."""

    def _evidence(self, name, grids, detected, matched, tile_points):
        features = [
            make_features(k, tile_points[:detected], unit_descriptors(detected, seed=k))
            for k in range(len(grids))
        ]
        edges = [exact_edge(0, 1, AffineTransform.identity(), tile_points[:matched])] if matched else []
        return ChannelEvidence(name, grids, [], features, PairGraph(list(range(len(grids))), edges))

    def test_richest_channel_first(self, surface, tile_points):
        """Test the channel with more features and matches ranks first."""
        primary = [surface, surface]
        flat = [Grid.from_array(np.zeros(surface.shape))] * 2
        rich = self._evidence("amplitude", primary, 40, 30, tile_points)
        poor = self._evidence("phase", flat, 5, 0, tile_points)
        ranking = rank_channels([poor, rich], primary)
        assert [s.channel for s in ranking] == ["amplitude", "phase"]
        assert ranking[0].score > ranking[1].score
        assert ranking[0].mean_corr == pytest.approx(1.0)
        assert ranking[0].to_report().score == ranking[0].score

    def test_ties_by_name(self, surface, tile_points):
        """Test identical evidence ranks alphabetically."""
        grids = [surface, surface]
        a = self._evidence("beta", grids, 10, 8, tile_points)
        b = self._evidence("alpha", grids, 10, 8, tile_points)
        ranking = rank_channels([a, b], grids)
        assert [s.channel for s in ranking] == ["alpha", "beta"]
        assert all(s.score == 0.0 for s in ranking)


class TestChannelGrids:
    """Tests for channel synthesis before detection."""

    def test_primary_is_corrected(self, two_tile_stack):
        """Test the primary channel is flattened and plane-corrected."""
        grids = channel_grids(two_tile_stack, "topo", "topo")
        expected = preprocess_primary(two_tile_stack.tiles[0].grids["topo"])
        assert np.allclose(grids[0].samples, expected.samples)

    def test_deriv_x_of_corrected_primary(self, two_tile_stack):
        """Test deriv_x differentiates the corrected primary."""
        options = PreprocessOptions(deriv_smooth=1.0)
        grids = channel_grids(two_tile_stack, "deriv_x", "topo", options)
        corrected = preprocess_primary(two_tile_stack.tiles[1].grids["topo"])
        assert np.allclose(grids[1].samples, derive_x(corrected, 1.0).samples)

    def test_measured_channel_untouched(self, two_tile_stack):
        """Test other channels are used as measured."""
        grids = channel_grids(two_tile_stack, "amplitude", "topo")
        assert grids[0] is two_tile_stack.tiles[0].grids["amplitude"]

    def test_unknown_channel(self, two_tile_stack):
        """Test an unknown channel raises InputError."""
        with pytest.raises(InputError):
            channel_grids(two_tile_stack, "phase", "topo")


class TestRegistrationError:
    """Tests for ground-truth registration error."""

    # 3x3 array of 64 px tiles, 60 px apart, each slightly rotated
    TRUTH = {
        3 * r + c: AffineTransform(
            math.cos(0.002 * (r - c)),
            -math.sin(0.002 * (r - c)),
            60.0 * c + 0.3 * r,
            math.sin(0.002 * (r - c)),
            math.cos(0.002 * (r - c)),
            60.0 * r - 0.2 * c,
        )
        for r in range(3)
        for c in range(3)
    }
    DIMS = {t: (64, 64) for t in range(9)}

    def _layout(self, poses):
        return Layout(
            poses=[GlobalPose(t, poses[t]) for t in sorted(poses)],
            member_tiles=sorted(poses),
            residual_rms=0.0,
            reference=0,
        )

    def test_gauge_invariant(self):
        """Test a rigid change of frame has zero error."""
        c, s = math.cos(0.3), math.sin(0.3)
        gauge = AffineTransform(c, -s, -4.0, s, c, 12.0)
        estimated = {t: gauge.compose(p) for t, p in self.TRUTH.items()}
        mean_err, max_err = registration_error(self._layout(estimated), self.TRUTH, self.DIMS)
        assert mean_err == pytest.approx(0.0, abs=1e-6)
        assert max_err == pytest.approx(0.0, abs=1e-6)

    def test_misplaced_tile(self):
        """Test the surrounded center tile shifted by 2 px shows up in the max error."""
        estimated = dict(self.TRUTH)
        estimated[4] = AffineTransform.translation(2.0, 0.0).compose(self.TRUTH[4])
        mean_err, max_err = registration_error(self._layout(estimated), self.TRUTH, self.DIMS)
        assert max_err == pytest.approx(2.0, abs=0.05)
        assert mean_err < max_err

    def test_missing_truth(self):
        """Test member tiles must all have a truth pose."""
        truth = {t: p for t, p in self.TRUTH.items() if t != 8}
        with pytest.raises(InputError):
            registration_error(self._layout(self.TRUTH), truth, self.DIMS)

    def test_fit_gauge_exact(self, tile_points):
        """Test the robust fit recovers an exact affine map."""
        t = AffineTransform(1.01, 0.02, 5.0, -0.03, 0.99, -2.0)
        fitted = fit_gauge(tile_points, t.apply(tile_points))
        assert np.allclose(fitted.coefficients, t.coefficients, atol=1e-6)
