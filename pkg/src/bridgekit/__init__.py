"""Two-tower vision-language model with bridge layers, built on a small numpy autograd."""

from .config import RunConfig, parse_config, render_config
from .model import ModelConfig, VisionLanguageModel, paper_scale_config

__version__ = "0.1.0"

__all__ = ["ModelConfig", "RunConfig", "VisionLanguageModel", "paper_scale_config", "parse_config", "render_config"]
