"""Tests for the command-line interface."""

import json

import cv2
import numpy as np
import pytest
from typer.testing import CliRunner

from afm_stitch import __version__
from afm_stitch.cli import app

runner = CliRunner()


class TestGlobalOptions:
    """Tests for the application callback."""

    def test_version(self):
        """Test --version prints the version without a command."""
        result = runner.invoke(app, ["--version"])
        assert result.exit_code == 0
        assert __version__ in result.output

    def test_invalid_output_format(self, stack_manifest):
        """Test an unknown output format is a usage error."""
        result = runner.invoke(app, ["--output-format", "xml", "stats", "-i", str(stack_manifest)])
        assert result.exit_code == 2

    def test_log_file(self, tmp_path, stack_manifest):
        """Test --log-file receives debug records."""
        log_file = tmp_path / "run.log"
        result = runner.invoke(
            app,
            ["-q", "--log-file", str(log_file), "stats", "-i", str(stack_manifest), "--channel", "amplitude"],
        )
        assert result.exit_code == 0
        assert "Run configuration" in log_file.read_text()


class TestSynthCommand:
    """Tests for the synth command."""

    def test_writes_stack(self, tmp_path):
        """Test a small stack and its truth are written."""
        out = tmp_path / "stack"
        result = runner.invoke(
            app,
            ["-q", "synth", "--out", str(out), "--rows", "2", "--cols", "2", "--tile-size", "64",
             "--overlap", "0.2", "--jitter-px", "1"],
        )
        assert result.exit_code == 0
        assert (out / "manifest.json").exists()
        assert (out / "truth.json").exists()
        assert "manifest.json" in result.output
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["channels"] == ["topo", "amplitude"]
        assert len(manifest["tiles"]) == 4

    def test_invalid_settings(self, tmp_path):
        """Test out-of-range settings exit with code 2."""
        result = runner.invoke(app, ["synth", "--out", str(tmp_path / "s"), "--overlap", "0.7"])
        assert result.exit_code == 2
        assert "Configuration Error" in result.output


class TestStitchCommand:
    """Tests for the stitch command."""

    def test_missing_input(self, tmp_path):
        """Test a run without an input manifest exits with code 2."""
        result = runner.invoke(app, ["stitch", "--out", str(tmp_path / "out")])
        assert result.exit_code == 2

    def test_missing_manifest(self, tmp_path):
        """Test a manifest path that does not exist exits with code 2."""
        result = runner.invoke(
            app, ["stitch", "-i", str(tmp_path / "nope.json"), "--out", str(tmp_path / "out")]
        )
        assert result.exit_code == 2
        assert "Input Error" in result.output

    def test_bad_config_file(self, tmp_path, stack_manifest):
        """Test an unreadable config file exits with code 2."""
        config = tmp_path / "run.json"
        config.write_text("{not json")
        result = runner.invoke(app, ["stitch", "-i", str(stack_manifest), "-c", str(config)])
        assert result.exit_code == 2

    @pytest.mark.integration
    @pytest.mark.slow
    def test_direct_featureless_exits_3(self, tmp_path, featureless_dataset):
        """Test stitching on a detail-free primary exits with code 3."""
        manifest, _ = featureless_dataset
        result = runner.invoke(
            app,
            ["-q", "stitch", "-i", str(manifest), "--out", str(tmp_path / "out"), "--secondary", "primary"],
        )
        assert result.exit_code == 3
        assert "Stitch Impossible" in result.output

    @pytest.mark.integration
    @pytest.mark.slow
    def test_amplitude_then_ssim(self, tmp_path, synthetic_dataset):
        """Test a bi-channel run writes its outputs and compares equal to itself."""
        manifest, truth = synthetic_dataset
        out = tmp_path / "out"
        result = runner.invoke(
            app,
            ["stitch", "-i", str(manifest), "--out", str(out), "--secondary", "amplitude",
             "--truth", str(truth), "-j", "2"],
        )
        assert result.exit_code == 0
        for name in ("mosaic.f32", "mosaic.json", "preview.png", "layout.json", "report.json"):
            assert (out / name).exists()
        report = json.loads((out / "report.json").read_text())
        assert report["chosen_channel"] == "amplitude"
        assert report["metrics"]["reg_error_mean_px"] < 1.0
        assert "workers" not in report["parameters"]

        sidecar = str(out / "mosaic.json")
        compared = runner.invoke(app, ["ssim", sidecar, sidecar])
        assert compared.exit_code == 0
        assert "SSIM: 1.000000" in compared.output


class TestAnalysisCommands:
    """Tests for score, stats and ssim."""

    def test_stats(self, stack_manifest):
        """Test per-channel statistics for every candidate."""
        result = runner.invoke(app, ["-q", "stats", "-i", str(stack_manifest)])
        assert result.exit_code == 0
        for name in ("amplitude", "deriv_x", "topo"):
            assert name in result.output

    def test_score(self, stack_manifest):
        """Test ranking the chosen candidates."""
        result = runner.invoke(
            app,
            ["-q", "score", "-i", str(stack_manifest), "--channel", "amplitude", "--channel", "deriv_x"],
        )
        assert result.exit_code == 0
        assert "amplitude" in result.output
        assert "deriv_x" in result.output

    def test_score_unknown_channel(self, stack_manifest):
        """Test an unknown candidate exits with code 2."""
        result = runner.invoke(app, ["-q", "score", "-i", str(stack_manifest), "--channel", "phase"])
        assert result.exit_code == 2

    def test_ssim_missing_file(self, tmp_path):
        """Test comparing a missing mosaic exits with code 2."""
        missing = str(tmp_path / "mosaic.json")
        result = runner.invoke(app, ["ssim", missing, missing])
        assert result.exit_code == 2


class TestImportCommand:
    """Tests for image import."""

    def test_import(self, tmp_path, textured_surface):
        """Test two channels of two images become a stack."""
        src = tmp_path / "scan"
        src.mkdir()
        for k in range(2):
            crop = textured_surface[0:32, 20 * k : 20 * k + 32]
            scaled = (crop - crop.min()) / (crop.max() - crop.min())
            cv2.imwrite(str(src / f"t{k}_height.png"), (scaled * 65535).astype(np.uint16))
            cv2.imwrite(str(src / f"t{k}_amp.png"), (scaled * 255).astype(np.uint8))
        out = tmp_path / "stack"
        result = runner.invoke(
            app,
            ["import", "--channel", f"topo={src}/*_height.png", "--channel", f"amplitude={src}/*_amp.png",
             "--out", str(out), "--pixel-size", "0.1", "--grid-cols", "2"],
        )
        assert result.exit_code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["channels"] == ["topo", "amplitude"]
        assert len(manifest["tiles"]) == 2

    def test_malformed_channel_spec(self, tmp_path):
        """Test a channel without a pattern exits with code 2."""
        result = runner.invoke(app, ["import", "--channel", "topo", "--out", str(tmp_path / "s")])
        assert result.exit_code == 2
