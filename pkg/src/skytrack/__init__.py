"""skytrack: 3D trajectory reconstruction of a flying target from an ad-hoc
network of unsynchronized, rolling-shutter cameras with unknown poses.

The library recovers, from 2D detection tracks alone, the camera poses, the
per-camera time offset and drift, the rolling-shutter readout speeds, and
the target trajectory as a piecewise cubic spline over a global timeline.
"""

from . import errors
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    EssentialMatrix,
    decompose_essential,
    normalized_to_pixel,
    pixel_to_normalized,
    project,
    sampson_distance,
)
from .timing import Detection2D, DetectionTrack, TimeModel, detection_time, frame_to_time
from .splines import PiecewiseSpline, TrajectoryModel, fit_spline
from .matching import Match2D2D, Match3D2D, match_2d2d, match_3d2d
from .robust import (
    RansacConfig,
    TwoViewResult,
    solve_p3p_ransac,
    solve_two_view_sync,
    triangulate,
)
from .bundle import (
    BAOptions,
    BAProblem,
    BAReport,
    gradient_check,
    residual_force,
    residual_kinetic,
    residual_reprojection,
    solve,
)
from .evaluation import ErrorReport, align_similarity, error_stats, evaluate_trajectories
from .synthetic import GroundTruth, SceneSpec, compare, generate
from .pipeline import PipelineConfig, ReconstructionState, run_full_reconstruction, tracking_mode

__version__ = "0.1.0"

__all__ = [
    "errors",
    "CameraIntrinsics", "CameraPose", "EssentialMatrix", "decompose_essential",
    "normalized_to_pixel", "pixel_to_normalized", "project", "sampson_distance",
    "Detection2D", "DetectionTrack", "TimeModel", "detection_time", "frame_to_time",
    "PiecewiseSpline", "TrajectoryModel", "fit_spline",
    "Match2D2D", "Match3D2D", "match_2d2d", "match_3d2d",
    "RansacConfig", "TwoViewResult", "solve_p3p_ransac", "solve_two_view_sync",
    "triangulate",
    "BAOptions", "BAProblem", "BAReport", "gradient_check",
    "residual_force", "residual_kinetic", "residual_reprojection", "solve",
    "ErrorReport", "align_similarity", "error_stats", "evaluate_trajectories",
    "GroundTruth", "SceneSpec", "compare", "generate",
    "PipelineConfig", "ReconstructionState", "run_full_reconstruction", "tracking_mode",
    "__version__",
]
