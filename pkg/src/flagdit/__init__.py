"""Flow-based diffusion transformer (Flag-DiT) at desk scale."""

from .codec import Layout, layout_for
from .model import FlagDiT, FlagDiTConfig, ForwardOptions, preset

__version__ = "0.1.0"

__all__ = ["FlagDiT", "FlagDiTConfig", "ForwardOptions", "Layout", "layout_for", "preset"]
