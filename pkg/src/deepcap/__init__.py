"""Capsule-network lumen segmentation engine."""
from .model import DEFAULT_CONFIG, REDUCED_CONFIG, DeepCap, ModelConfig, build_model

__all__ = ["DEFAULT_CONFIG", "REDUCED_CONFIG", "DeepCap", "ModelConfig", "build_model"]
__version__ = "0.1.0"
