"""Sparse-view CT reconstruction with a view-sampling cold-diffusion model."""
from .geometry import FanBeamGeometry, Sinogram, back_project, fbp, forward_project

__version__ = "0.1.0"

__all__ = [
    "FanBeamGeometry",
    "Sinogram",
    "back_project",
    "fbp",
    "forward_project",
    "__version__",
]
