"""Online multi-object tracking with a coupled 2D-3D Kalman filter.

Per frame, 2D detections are fused with 3D object proposals by CRF energy
minimization, then an over-complete set of track hypotheses is extended and a
consistent subset is selected.
"""
from .geometry import BBox2D, CameraIntrinsics, EgoPose, FrameContext, GroundPlane
from .metrics import GTState, GTTrajectory, MotReport, evaluate
from .observations import Category, Detection2D, Observation, Proposal3D, fuse_frame
from .pipeline import PipelineConfig, RunMode, run
from .tracker import HypothesisTracker, TrackerConfig, TrackReport, TrackRow

__version__ = "0.1.0"

__all__ = [
    "BBox2D", "CameraIntrinsics", "EgoPose", "FrameContext", "GroundPlane",
    "GTState", "GTTrajectory", "MotReport", "evaluate",
    "Category", "Detection2D", "Observation", "Proposal3D", "fuse_frame",
    "PipelineConfig", "RunMode", "run",
    "HypothesisTracker", "TrackerConfig", "TrackReport", "TrackRow",
]
