"""Burst denoising with content-adaptive filtering and learned fusion."""

from .imaging import load_image, psnr, save_image
from .net import ArchConfig, BurstDenoiser
from .noise import NoiseParams, synthesize_burst

__all__ = ["ArchConfig", "BurstDenoiser", "NoiseParams", "load_image", "psnr", "save_image", "synthesize_burst"]
__version__ = "0.1.0"
