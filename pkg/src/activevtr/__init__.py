"""Deterministic simulation suite for active pan-tilt view planning in a
visual teach-and-repeat loop.

Subpackages are imported lazily by the code that needs them; the common entry
points are re-exported here for convenience.
"""

from .geometry import (
    CameraIntrinsics,
    PanTilt,
    Pose3,
    PtuModel,
    default_intrinsics,
)

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "PanTilt",
    "Pose3",
    "PtuModel",
    "default_intrinsics",
    "__version__",
]
