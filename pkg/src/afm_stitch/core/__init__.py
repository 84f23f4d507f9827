"""Stitching library: tile storage, preprocessing, features, matching, poses and compositing."""
