"""Few-view object reconstruction with joint relative camera pose estimation."""

__version__ = "0.1.0"
