"""Monocular 3D pose pipeline core: location-map decoding, kinematic skeleton
fitting, 1-Euro filtering and keypoint-driven box tracking, driven by a
synthetic stand-in for the pose network."""

__version__ = "0.1.0"
