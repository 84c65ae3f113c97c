"""Compiler and simulator for multimode DAE models."""

from .frontend import load_model, parse_model
from .modes import ModeEngine, explore_modes

__all__ = ["load_model", "parse_model", "ModeEngine", "explore_modes"]
__version__ = "0.1.0"
