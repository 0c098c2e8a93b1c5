"""Serve many expert-specialized fine-tuned adapters over one shared MoE base model."""
from .config import EngineConfig, ModelConfig, PageConfig, SchedulerConfig
from .engine import Engine
from .errors import EsftServeError

__version__ = "0.1.0"

__all__ = ["Engine", "EngineConfig", "EsftServeError", "ModelConfig", "PageConfig", "SchedulerConfig"]
