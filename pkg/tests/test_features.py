"""Tests for keypoint detection."""

import json
import math

import numpy as np
import pytest
from scipy import ndimage

from afm_stitch.config import DetectorParams
from afm_stitch.core.exceptions import InputError
from afm_stitch.core.features import FeatureSet, Keypoint, detect, detect_all, dump_features
from afm_stitch.core.preprocess import Grid, normalize_u8


@pytest.fixture
def textured_image(textured_surface) -> np.ndarray:
    """A 128x128 quantized crop of the textured surface."""
    return normalize_u8(Grid.from_array(textured_surface[:128, :128]))


def _nearest(points: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Distance from each point to its closest target."""
    if len(targets) == 0:
        return np.full(len(points), np.inf)
    return np.linalg.norm(points[:, None, :] - targets[None, :, :], axis=2).min(axis=1)


class TestDetect:
    """Tests for detect."""

    def test_finds_keypoints(self, textured_image):
        """Test a textured image yields keypoints with unit descriptors."""
        fs = detect(textured_image, tile_index=3, channel="amplitude")
        assert len(fs) > 20
        assert fs.tile_index == 3
        assert fs.channel == "amplitude"
        assert fs.descriptors.shape == (len(fs), 128)
        assert np.allclose(np.linalg.norm(fs.descriptors, axis=1), 1.0)
        assert fs.upsampled

    def test_keypoint_properties(self, textured_image):
        """Test positions are in bounds and orientations in [0, 2pi)."""
        fs = detect(textured_image)
        pts = fs.points
        assert (pts >= 0).all()
        assert (pts <= 127).all()
        assert all(0.0 <= kp.orientation < 2.0 * math.pi for kp in fs.keypoints)
        assert all(kp.scale > 0 for kp in fs.keypoints)

    def test_sorted_by_response(self, textured_image):
        """Test keypoints come strongest first."""
        responses = [kp.response for kp in detect(textured_image).keypoints]
        assert responses == sorted(responses, reverse=True)

    def test_deterministic(self, textured_image):
        """Test repeated detection gives identical output."""
        a = detect(textured_image)
        b = detect(textured_image)
        assert a.keypoints == b.keypoints
        assert np.array_equal(a.descriptors, b.descriptors)

    def test_octave_cap(self, textured_image):
        """Test a cap of one octave keeps only the upsampled octave."""
        fs = detect(textured_image, DetectorParams(octaves=1))
        assert len(fs) > 0
        assert {kp.octave for kp in fs.keypoints} == {-1}

    def test_constant_image_has_no_keypoints(self):
        """Test a flat image yields an empty set."""
        fs = detect(np.full((64, 64), 128, dtype=np.uint8))
        assert len(fs) == 0
        assert fs.descriptors.shape == (0, 128)

    def test_masked_region_excluded(self, textured_image):
        """Test no keypoint is anchored on invalid pixels."""
        valid = np.ones(textured_image.shape, dtype=bool)
        valid[:, :64] = False
        fs = detect(textured_image, valid=valid)
        assert len(fs) > 0
        assert all(kp.x >= 63.0 for kp in fs.keypoints)

    def test_too_small(self):
        """Test images under 16x16 raise InputError."""
        with pytest.raises(InputError):
            detect(np.zeros((15, 40), dtype=np.uint8), tile_index=2)

    def test_blob_centers(self):
        """Test isolated Gaussian blobs are found at their centers."""
        yy, xx = np.mgrid[0:200, 0:200].astype(np.float64)
        centers = np.array([(20.0 + 40 * i, 20.0 + 40 * j) for j in range(5) for i in range(5)])
        img = np.zeros((200, 200))
        for cx, cy in centers:
            img += 200.0 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 3.0**2))
        fs = detect(np.rint(img).astype(np.uint8), DetectorParams(octaves=3))
        assert len(fs) >= 25
        assert (_nearest(fs.points, centers) <= 1.5).all()
        assert (_nearest(centers, fs.points) <= 1.5).all()

    def test_quarter_turn(self, textured_image):
        """Test a 90 degree rotation moves keypoints to the rotated positions."""
        params = DetectorParams(octaves=1)
        base = detect(textured_image, params)
        turned = detect(np.ascontiguousarray(np.rot90(textured_image)), params)
        side = textured_image.shape[1] - 1
        expected = np.column_stack([base.points[:, 1], side - base.points[:, 0]])
        assert abs(len(turned) - len(base)) <= 0.1 * len(base)
        assert (_nearest(expected, turned.points) <= 1.5).mean() >= 0.9

    def test_contrast_threshold_monotone(self, textured_image):
        """Test raising the contrast threshold never adds keypoints."""
        counts = [
            len(detect(textured_image, DetectorParams(contrast_threshold=t)))
            for t in (0.01, 0.02, 0.04, 0.08)
        ]
        assert counts == sorted(counts, reverse=True)
        assert counts[0] > counts[-1]

    def test_constant_offset_keeps_positions(self, textured_image):
        """Test brightening every pixel leaves keypoint positions in place."""
        darker = textured_image // 2
        base = detect(darker)
        brighter = detect(darker + 40)
        assert abs(len(brighter) - len(base)) <= 0.05 * len(base)
        assert (_nearest(base.points, brighter.points) <= 0.05).mean() >= 0.9

    def test_descriptor_norms(self, textured_image):
        """Test every descriptor has unit norm, or zero norm when degenerate."""
        norms = np.linalg.norm(detect(textured_image).descriptors, axis=1)
        assert len(norms) > 0
        assert ((norms == 0.0) | (np.abs(norms - 1.0) <= 1e-6)).all()

    def test_large_tile_not_upsampled(self):
        """Test tiles over 2048 px on a side skip the upsampled octave."""
        rng = np.random.default_rng(41)
        noise = ndimage.gaussian_filter(rng.normal(size=(64, 2100)), 2.0)
        fs = detect(normalize_u8(Grid.from_array(noise)))
        assert not fs.upsampled
        assert len(fs) > 0
        assert min(kp.octave for kp in fs.keypoints) >= 0


class TestFeatureSet:
    """Tests for the FeatureSet container."""

    def test_descriptor_shape_checked(self):
        """Test descriptors must match the keypoint count."""
        kp = Keypoint(x=1.0, y=2.0, scale=1.5, orientation=0.0, response=0.1)
        with pytest.raises(ValueError):
            FeatureSet(tile_index=0, channel="c", keypoints=[kp], descriptors=np.zeros((2, 128)))

    def test_empty_points(self):
        """Test an empty set has a (0, 2) point array."""
        assert FeatureSet(tile_index=0, channel="c", keypoints=[]).points.shape == (0, 2)


class TestDetectAll:
    """Tests for batch detection."""

    def test_tile_index_follows_position(self, textured_image):
        """Test results keep input order and index, whatever the worker count."""
        images = [(textured_image, np.ones(textured_image.shape, dtype=bool))] * 3
        serial = detect_all(images, DetectorParams(), "amplitude", workers=1)
        parallel = detect_all(images, DetectorParams(), "amplitude", workers=3)
        assert [fs.tile_index for fs in serial] == [0, 1, 2]
        assert [len(fs) for fs in serial] == [len(fs) for fs in parallel]
        assert serial[2].keypoints == parallel[2].keypoints


class TestDumpFeatures:
    """Tests for the feature dump."""

    def test_writes_json_and_overlay(self, tmp_path, textured_image):
        """Test both artifacts are written and the JSON lists every keypoint."""
        fs = detect(textured_image, tile_index=4, channel="deriv_x")
        json_path, png_path = dump_features(fs, textured_image, tmp_path / "features")
        assert json_path.name == "features_tile_004_deriv_x.json"
        assert png_path.exists()
        data = json.loads(json_path.read_text())
        assert len(data["keypoints"]) == len(fs)
        assert data["channel"] == "deriv_x"
