"""Coarse-to-fine multistage structure-from-motion toolkit."""

from .config import PipelineConfig
from .pipeline import run_pipeline

__version__ = "0.1.0"

__all__ = ["PipelineConfig", "run_pipeline", "__version__"]
