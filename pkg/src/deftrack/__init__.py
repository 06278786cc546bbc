"""Monocular tracking of deforming scenes.

The pipeline bootstraps a metric-up-to-scale point map from two frames
of a moving monocular camera, then tracks every later frame by jointly
estimating the camera pose and a per-point deformation increment with a
robust sparse Levenberg-Marquardt solver. A synthetic deforming-scene
simulator and a scale-aligned evaluator close the loop for end-to-end
experiments.
"""

from .config import (ConfigError, DeformConfig, DetectorConfig, InitConfig,
                     RunConfig, SimConfig, SolverConfig, TrackerConfig,
                     load_run_config)
from .deform import (FrameResult, PointMap, SequenceTracker, TrackingError,
                     build_graph, predict_pose, track_frame)
from .evaluate import (EvalReport, evaluate_sequence, optimal_scale,
                       rmse_frame, trend_report, umeyama_alignment)
from .geometry import (CameraModel, Pose, load_calibration, save_calibration,
                       se3_exp, se3_log, so3_exp, so3_log)
from .image import ImageBuffer, Pyramid, build_pyramid, detect_features, load_image
from .initializer import (InitializationError, InitResult, initialize_map,
                          triangulate_idwm)
from .nlls import Problem, ResidualGroup, SolveReport, check_jacobians, solve
from .sim import Scene, build_scene, deform_vertices, emit_observations
from .tracker import TrackSession, ssim

__version__ = "0.1.0"

__all__ = [
    "CameraModel", "ConfigError", "DeformConfig", "DetectorConfig",
    "EvalReport", "FrameResult", "ImageBuffer", "InitConfig", "InitResult",
    "InitializationError", "PointMap", "Pose", "Problem", "Pyramid",
    "ResidualGroup", "RunConfig", "Scene", "SequenceTracker", "SimConfig",
    "SolveReport", "SolverConfig", "TrackSession", "TrackerConfig",
    "TrackingError", "build_graph", "build_pyramid", "build_scene",
    "check_jacobians", "deform_vertices", "detect_features",
    "emit_observations", "evaluate_sequence", "initialize_map", "load_image",
    "load_calibration", "load_run_config", "optimal_scale", "predict_pose",
    "rmse_frame", "save_calibration", "se3_exp", "se3_log", "so3_exp",
    "so3_log", "solve", "ssim", "track_frame", "trend_report",
    "triangulate_idwm", "umeyama_alignment",
]
