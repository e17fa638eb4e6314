"""Unsupervised object-centric neural fields inferred from a single image."""
from .config import RunConfig, load_config, parse_config
from .model import ObjectCentricModel, build_model

__all__ = ["RunConfig", "load_config", "parse_config", "ObjectCentricModel", "build_model"]
__version__ = "0.1.0"
