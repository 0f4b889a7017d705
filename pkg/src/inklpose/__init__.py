"""Category-level 6D pose estimation with instance-adaptive keypoints."""

__version__ = "0.1.0"
