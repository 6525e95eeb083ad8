"""Two-stage self-supervised pre-training over point clouds and images with a
differentiable Gaussian splatting branch."""

from .autodiff import Tensor
from .camera import CameraModel, complementary_masks, project, projection_jacobian
from .gsplat import GaussianSet, build_covariance, optimize_gaussians, psnr, rasterize, ssim
from .mae import DualBranchMAE, MAEConfig, load_checkpoint, reconstruct_full_cloud, save_checkpoint
from .optim import AdamW
from .pointcloud import PatchSet, PointCloud, chamfer, downsample, fps_knn_patches
from .scene import SceneSpec, generate_scene, render_ground_truth, sample_point_cloud
from .trainer import TrainConfig, evaluate, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "AdamW", "CameraModel", "DualBranchMAE", "GaussianSet", "MAEConfig",
    "PatchSet", "PointCloud", "SceneSpec", "Tensor", "TrainConfig",
    "build_covariance", "chamfer", "complementary_masks", "downsample",
    "evaluate", "fps_knn_patches", "generate_scene", "load_checkpoint",
    "optimize_gaussians", "project", "projection_jacobian", "psnr",
    "rasterize", "reconstruct_full_cloud", "render_ground_truth",
    "sample_point_cloud", "save_checkpoint", "ssim", "train_stage1",
    "train_stage2",
]
