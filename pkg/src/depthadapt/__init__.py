"""Online depth adaptation for keyframe SLAM.

A small convolutional depth predictor is fine-tuned on the live keyframe
stream with importance-weighted regularization and experience replay; the
adapted depth culls inconsistent map points, and a global photometric
bundle adjustment refines poses and landmark depths. Everything runs on
numpy with an in-package reverse-mode tape.
"""

from .config import ConfigError, RunConfig, load_config, parse_config
from .continual import (AdamState, ImportanceMatrix, MasState, RegularizerConfig,
                        ReplayBuffer, SiState, TrainerState, fine_tune_step,
                        restore_trainer, trainer_extensions)
from .controller import (AdaptationController, BAScheduler, ControllerConfig, Event,
                         EventLog)
from .depthnet import DepthNet, NetSpec, load_checkpoint, save_checkpoint
from .geometry import Intrinsics, PoseSE3, pose_distance, se3_exp
from .keyframes import (Channel, Keyframe, KeyframeGraph, KeyframeStore, MapPoint,
                        SparsePoint, decode_keyframe, encode_graph, encode_keyframe,
                        read_message_log)
from .losses import (LossBreakdown, LossWeights, photometric_loss, smoothness_loss,
                     sparse_depth_loss, ssim, train_loss, validation_loss)
from .metrics import (DepthEvalConfig, DepthEvalResult, Trajectory, ate_rmse,
                      evaluate_depth, map_depth_error, percent_correct,
                      scale_invariant_error, umeyama)
from .pipeline import (AdaptationRun, BAPass, KeyframeSource, RunResult, build_source,
                       pretrain, register_from_sparse, run_adaptation)
from .refine import (BALandmark, BAOptions, BAProblem, BAResult, CullConfig,
                     CullReport, apply_ba_result, assign_hosts, build_ba, cull_check,
                     cull_map, select_host, solve_ba)
from .synthetic import SceneSpec, SyntheticScene, env_a, env_b, feed_store, scene_preset
from .tum import TumConfig, associate, load_sequence, read_trajectory

__version__ = "0.1.0"

__all__ = [
    "AdamState", "AdaptationController", "AdaptationRun", "BALandmark", "BAOptions",
    "BAPass", "BAProblem", "BAResult", "BAScheduler", "Channel", "ConfigError",
    "ControllerConfig", "CullConfig", "CullReport", "DepthEvalConfig",
    "DepthEvalResult", "DepthNet", "Event", "EventLog", "ImportanceMatrix",
    "Intrinsics", "Keyframe", "KeyframeGraph", "KeyframeSource", "KeyframeStore",
    "LossBreakdown", "LossWeights", "MapPoint", "MasState", "NetSpec", "PoseSE3",
    "RegularizerConfig", "ReplayBuffer", "RunConfig", "RunResult", "SceneSpec",
    "SiState", "SparsePoint", "SyntheticScene", "Trajectory", "TrainerState",
    "TumConfig", "apply_ba_result", "assign_hosts", "associate", "ate_rmse",
    "build_ba", "build_source", "cull_check", "cull_map", "decode_keyframe",
    "encode_graph", "encode_keyframe", "env_a", "env_b", "evaluate_depth",
    "feed_store", "fine_tune_step", "load_checkpoint", "load_config",
    "load_sequence", "map_depth_error", "parse_config", "percent_correct",
    "pose_distance", "pretrain", "read_message_log", "read_trajectory",
    "register_from_sparse", "restore_trainer", "run_adaptation",
    "save_checkpoint", "scale_invariant_error", "scene_preset", "se3_exp",
    "photometric_loss", "select_host", "smoothness_loss", "solve_ba",
    "sparse_depth_loss", "ssim", "train_loss", "trainer_extensions", "umeyama",
    "validation_loss",
]
