"""Console output helpers for afm-stitch."""
