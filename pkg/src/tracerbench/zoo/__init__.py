"""Emulator architectures mapping stacked input channels to per-level raw deltas."""

from .build import build, count_parameters, load_checkpoint, read_header, save_checkpoint
from .config import ARCHS, ArchConfig, preset
from .sfno import SFNO, sfno_forward
from .swin import Swin, swin_forward
from .unet import UNet, unet_forward

__all__ = [
    "ARCHS", "ArchConfig", "SFNO", "Swin", "UNet", "build", "count_parameters",
    "load_checkpoint", "preset", "read_header", "save_checkpoint", "sfno_forward",
    "swin_forward", "unet_forward",
]
