"""Tests for afm-stitch."""
