"""CLI command modules.

Each module holds the commands of one functional area (stitching,
synthetic data, channel analysis, conversion).
"""
