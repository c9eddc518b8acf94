"""LIDAR-camera fusion 3D car detection on a from-scratch numpy tensor engine."""

__version__ = "0.1.0"
