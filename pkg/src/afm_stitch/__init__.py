"""afm-stitch - Bi-channel aided stitching of atomic force microscopy tile stacks."""

__version__ = "0.1.0"
__author__ = "afm-stitch Contributors"
__license__ = "MIT"
