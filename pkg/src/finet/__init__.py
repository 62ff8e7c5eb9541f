"""Two-stage compatible and diverse garment inpainting on a synthetic outfit dataset."""

from .config import Config, load_config
from .distributions import DiagonalGaussian, kl_between, kl_to_standard, sample_reparam
from .pipeline import inpaint, reconstruct, transfer

__version__ = "0.1.0"

__all__ = [
    "Config",
    "DiagonalGaussian",
    "inpaint",
    "kl_between",
    "kl_to_standard",
    "load_config",
    "reconstruct",
    "sample_reparam",
    "transfer",
]
