"""Dual-stream optical + DSM segmentation with multi-scale selective scans and axial-relation fusion."""
from .network import ARGMamba, ModelConfig, build_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = ["ARGMamba", "ModelConfig", "build_model", "load_checkpoint", "save_checkpoint"]
