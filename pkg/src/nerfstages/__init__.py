"""Few-shot radiance fields in three stages.

A frequency-regularised coordinate network is fitted to a handful of views,
its renders at new poses train a fast factorised grid, and the grid is then
fine-tuned on the original views. Analytic scenes with exact renderers make
each step checkable.
"""

from .errors import NerfStagesError
from .field import RadianceField, load_checkpoint, save_checkpoint
from .geometry import Camera, look_at
from .renderer import RenderConfig, composite, render_image

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "NerfStagesError",
    "RadianceField",
    "RenderConfig",
    "composite",
    "load_checkpoint",
    "look_at",
    "render_image",
    "save_checkpoint",
]
