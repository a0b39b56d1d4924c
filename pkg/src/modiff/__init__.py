"""Frozen-denoiser image generation with trainable noise modulation.

A pixel-space diffusion model plus a small conditioning network that rewrites
the frozen model's per-step noise predictions as eps * (1 + gamma) + nu, so
samples follow segmentation-map and sketch conditions without touching the
base weights. Includes the tensor/autodiff core, schedules, samplers,
synthetic paired data, alignment metrics, and a CLI.
"""

__version__ = "0.1.0"

from .modulation import (McmTrainConfig, ModalityBundle, ModulationParams,
                         apply_dropout, encode_bundle, mcm_loss, modulate,
                         train_mcm)
from .sampler import SampleConfig, ddim_step, ddpm_step, sample, sigma_t
from .schedule import (VarianceSchedule, forward_noise, linear_schedule,
                       predict_x0, static_threshold)
from .tensor import GraphError, NonFiniteError, ShapeError, Tensor, no_grad
from .unet import UNet, UNetConfig, base_predict, build_unet, mcm_predict

__all__ = [
    "McmTrainConfig", "ModalityBundle", "ModulationParams", "apply_dropout",
    "encode_bundle", "mcm_loss", "modulate", "train_mcm",
    "SampleConfig", "ddim_step", "ddpm_step", "sample", "sigma_t",
    "VarianceSchedule", "forward_noise", "linear_schedule", "predict_x0",
    "static_threshold",
    "GraphError", "NonFiniteError", "ShapeError", "Tensor", "no_grad",
    "UNet", "UNetConfig", "base_predict", "build_unet", "mcm_predict",
    "__version__",
]
