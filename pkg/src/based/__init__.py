"""Bundle-adjusting deformable neural radiance fields on a numpy autodiff core."""

from .config import Config, desk_preset, load_config
from .data import Dataset, Frame, load_dataset, save_dataset
from .eval import depth_metrics, evaluate_run, psnr, ssim
from .geometry import Intrinsics, SE3Pose, backproject, generate_ray, pose_error, project
from .synthetic import SyntheticSceneSpec, generate_synthetic
from .training import run_training

__version__ = "0.1.0"

__all__ = [
    "Config", "desk_preset", "load_config", "Dataset", "Frame", "load_dataset", "save_dataset",
    "depth_metrics", "evaluate_run", "psnr", "ssim", "Intrinsics", "SE3Pose", "backproject",
    "generate_ray", "pose_error", "project", "SyntheticSceneSpec", "generate_synthetic", "run_training",
]
