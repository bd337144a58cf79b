"""Deep-feature-consistent VAE study of optic-disc images across latent sizes."""
from .data import DatasetSplit, LabeledImage, SyntheticParams, build_synthetic_dataset, generate_fundus
from .imaging import diff_mask, ssim, ssim_map
from .model import DfcVae, ExtractorConfig, VaeConfig, feature_perceptual_loss, kl_divergence, reparameterize, total_loss
from .train import TrainConfig, TrainHistory, sweep, train_one

__all__ = [
    "DatasetSplit",
    "DfcVae",
    "ExtractorConfig",
    "LabeledImage",
    "SyntheticParams",
    "TrainConfig",
    "TrainHistory",
    "VaeConfig",
    "build_synthetic_dataset",
    "diff_mask",
    "feature_perceptual_loss",
    "generate_fundus",
    "kl_divergence",
    "reparameterize",
    "ssim",
    "ssim_map",
    "sweep",
    "total_loss",
    "train_one",
]
