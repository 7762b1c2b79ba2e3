"""Monocular SLAM with capsule-network depth prediction, written on numpy."""

from .errors import CapslamError, RuntimeFailure, ValidationError
from .geometry import CameraIntrinsics, DepthMap, DisparityMap, ImageBuffer, PoseSE3, UncertaintyMap

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CapslamError",
    "DepthMap",
    "DisparityMap",
    "ImageBuffer",
    "PoseSE3",
    "RuntimeFailure",
    "UncertaintyMap",
    "ValidationError",
    "__version__",
]
