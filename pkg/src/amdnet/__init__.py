"""Moment-aware partially relevant video retrieval."""

from .model import ModelConfig
from .objectives import LossWeights
from .synthdata import SyntheticCorpusSpec

__all__ = ["ModelConfig", "LossWeights", "SyntheticCorpusSpec"]
__version__ = "0.1.0"
