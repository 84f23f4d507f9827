"""Tests for utility modules."""

import json

import pytest

from afm_stitch.utils.formatters import format_float, format_tiles, output_data
from afm_stitch.utils.progress import Spinner


class TestFormatTiles:
    """Tests for compact tile lists."""

    def test_runs(self):
        """Test consecutive tiles collapse into ranges."""
        assert format_tiles([8, 0, 1, 2, 3, 5, 7]) == "0-3, 5, 7-8"

    def test_single(self):
        """Test a lone tile."""
        assert format_tiles([4]) == "4"

    def test_empty(self):
        """Test no tiles."""
        assert format_tiles([]) == "-"


class TestFormatFloat:
    """Tests for number formatting."""

    def test_digits(self):
        """Test rounding to the requested decimals."""
        assert format_float(1.23456) == "1.235"
        assert format_float(1.23456, 1) == "1.2"

    def test_missing(self):
        """Test None renders as N/A."""
        assert format_float(None) == "N/A"


class TestOutputData:
    """Tests for the universal output function."""

    def test_json(self, capsys):
        """Test JSON output parses back."""
        output_data({"chosen_channel": "amplitude", "tiles": 9}, output_format="json")
        assert json.loads(capsys.readouterr().out) == {"chosen_channel": "amplitude", "tiles": 9}

    def test_yaml(self, capsys):
        """Test YAML output keeps key order."""
        output_data({"b": 1, "a": 2}, output_format="yaml")
        assert capsys.readouterr().out.splitlines() == ["b: 1", "a: 2"]

    @pytest.mark.parametrize("data", [[{"name": "topo", "score": 0.5}], {"name": "topo"}])
    def test_table(self, capsys, data):
        """Test tables and key-value tables render the values."""
        columns = [{"key": "name", "header": "Channel"}, {"key": "score", "header": "Score", "format": "float"}]
        output_data(data, output_format="table", table_columns=columns)
        assert "topo" in capsys.readouterr().out


class TestSpinner:
    """Tests for the status spinner."""

    def test_disabled_tracks_message(self):
        """Test a disabled spinner still records updates."""
        with Spinner("Loading", enabled=False) as spinner:
            spinner.update("Solving")
        assert spinner.message == "Solving"
