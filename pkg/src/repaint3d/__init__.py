"""Progressive visibility-aware repainting for refining textures of image-to-3D assets."""

from .assets import load_gaussians, load_mesh, load_pfm, load_png, save_gaussians, save_mesh, save_pfm, save_png
from .diffusion import (
    PROMPT_DIM,
    AttentionFeatures,
    Conditioning,
    Latent,
    NoiseSchedule,
    ToyDenoiser,
    ddim_invert_step,
    ddim_step,
    invert_trajectory,
    repaint_denoise,
    sample_trajectory,
    toy_denoiser_build,
)
from .errors import DataError, EmptyMaskWarning, NumericalError
from .geometry import CameraView, GBuffer, PointCloud3D, back_project, orbit_camera, project
from .meshtex import TexturedMesh, rasterize, refine_texture
from .metrics import mse, psnr
from .pipeline import PipelineConfig, RunResult, ViewSchedule, build_schedule, run
from .splat import Gaussian, GaussianCloud, refine_colors, render
from .visibility import binarize, default_tau, occlusion_mask, reproject, visibility_map

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
