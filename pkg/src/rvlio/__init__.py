"""Radar-velocity-aided LiDAR-inertial state estimation."""
__version__ = "0.1.0"
