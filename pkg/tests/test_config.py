"""Tests for run configuration loading and validation."""

import json
from pathlib import Path

import pytest
import yaml

from afm_stitch.config import (
    BlendMode,
    DetectorParams,
    PoseModel,
    RunConfig,
    build_run_config,
    load_config_file,
)
from afm_stitch.core.exceptions import ConfigurationError, InputError
from afm_stitch.core.preprocess import FlattenMethod


class TestRunConfig:
    """Tests for RunConfig defaults and validation."""

    def test_defaults(self):
        """Test documented default values."""
        config = RunConfig(input=Path("stack/manifest.json"))
        assert config.primary == "topo"
        assert config.secondary == "auto"
        assert config.matching.ratio == 0.75
        assert config.matching.reproj_px == 3.0
        assert config.matching.confidence == 1.0
        assert config.matching.seed == 7
        assert config.detector.contrast_threshold == 0.015
        assert config.detector.edge_threshold == 15.0
        assert config.pose.model is PoseModel.AFFINE
        assert config.blend.mode is BlendMode.FEATHER
        assert config.preprocess.flatten_method is FlattenMethod.LINE_MEDIAN
        assert config.workers == 1

    def test_direct_mode(self):
        """Test the primary itself or its alias selects direct stitching."""
        assert RunConfig(input=Path("m.json"), secondary="topo").direct
        assert RunConfig(input=Path("m.json"), secondary="primary").direct
        assert not RunConfig(input=Path("m.json"), secondary="amplitude").direct

    def test_parameters_exclude_scheduling(self):
        """Test workers and out never reach the report parameters."""
        config = RunConfig(input=Path("m.json"), out=Path("o"), workers=8)
        params = config.parameters()
        assert "workers" not in params
        assert "out" not in params
        assert params["input"] == "m.json"
        assert params["pose"]["model"] == "affine"

    @pytest.mark.parametrize("primary", ["deriv_x", "auto", "primary"])
    def test_reserved_primary_rejected(self, primary):
        """Test keywords and the synthesized channel cannot be the primary."""
        with pytest.raises(ConfigurationError):
            build_run_config({"input": "m.json", "primary": primary})

    def test_plane_flatten_method_rejected(self):
        """Test plane removal is not a line flatten method."""
        with pytest.raises(ConfigurationError):
            build_run_config({"input": "m.json", "preprocess": {"flatten_method": "plane"}})

    def test_unknown_key_rejected(self):
        """Test typos in config keys are caught."""
        with pytest.raises(ConfigurationError):
            build_run_config({"input": "m.json", "matching": {"ration": 0.8}})

    def test_configuration_error_is_input_error(self):
        """Test configuration errors map to the invalid-input exit code."""
        with pytest.raises(InputError):
            build_run_config({})


class TestDetectorParams:
    """Tests for detector octave resolution."""

    def test_derived_octaves(self):
        """Test the octave cap follows the smaller image side."""
        params = DetectorParams()
        assert params.resolved_octaves(512, 512) == 6
        assert params.resolved_octaves(512, 1024) == 6
        assert params.resolved_octaves(16, 16) == 1

    def test_explicit_octaves(self):
        """Test an explicit cap wins."""
        assert DetectorParams(octaves=2).resolved_octaves(512, 512) == 2

    def test_edge_threshold_above_one(self):
        """Test an edge threshold of 1 is rejected."""
        with pytest.raises(ValueError):
            DetectorParams(edge_threshold=1.0)


class TestBuildRunConfig:
    """Tests for merging files with explicit options."""

    def test_yaml_file_then_overrides(self, tmp_path):
        """Test explicit options win over the file and None means not given."""
        path = tmp_path / "run.yaml"
        path.write_text(
            yaml.safe_dump(
                {"input": "a.json", "secondary": "amplitude", "matching": {"ratio": 0.6, "seed": 3}}
            )
        )
        config = build_run_config(
            {"input": None, "matching": {"ratio": 0.7, "seed": None}}, config_path=path
        )
        assert config.input == Path("a.json")
        assert config.secondary == "amplitude"
        assert config.matching.ratio == 0.7
        assert config.matching.seed == 3

    def test_report_replay(self, tmp_path):
        """Test a report's parameters section reproduces the run."""
        original = RunConfig(
            input=Path("s/manifest.json"), secondary="deriv_x", pose={"huber_delta": 2.0}
        )
        report = {"version": 1, "chosen_channel": "deriv_x", "parameters": original.parameters()}
        path = tmp_path / "report.json"
        path.write_text(json.dumps(report))

        replayed = build_run_config({"out": tmp_path / "rerun"}, config_path=path)
        assert replayed.parameters() == original.parameters()
        assert replayed.out == tmp_path / "rerun"

    def test_missing_file(self, tmp_path):
        """Test a missing config file raises ConfigurationError."""
        with pytest.raises(ConfigurationError, match="not found"):
            load_config_file(tmp_path / "absent.yaml")

    def test_invalid_json(self, tmp_path):
        """Test malformed JSON raises ConfigurationError."""
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigurationError, match="Invalid JSON"):
            load_config_file(path)

    def test_not_a_mapping(self, tmp_path):
        """Test a top-level list is rejected."""
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigurationError, match="mapping"):
            load_config_file(path)
