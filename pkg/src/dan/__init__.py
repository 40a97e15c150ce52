"""Dual attention networks for visual question answering and image-text matching."""

from .config import ModelConfig, OptimizerConfig, preset
from .mdan import MDan
from .rdan import RDan

__version__ = "0.1.0"

__all__ = ["MDan", "ModelConfig", "OptimizerConfig", "RDan", "preset"]
