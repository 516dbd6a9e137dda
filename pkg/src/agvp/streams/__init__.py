"""Tracklet embedding streams: temporal-spatial, appearance, multi-scale."""
