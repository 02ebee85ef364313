"""flod: multi-level Gaussian splatting with per-level scale floors.

Train a scene as nested levels of 3D Gaussians, render any single level, or
composite a distance-banded mixture of levels under a screensize threshold.
"""

from .camera import Camera, look_at
from .model import (
    FrozenSplats,
    GaussianLevelSet,
    MultiLevelModel,
    clone_level,
    covariance,
    effective_scale,
    init_next_level,
    opacity,
    scale_constraint,
)
from .rasterizer import (
    BACKEND,
    DEFAULT_CONFIG,
    SMOOTH_CONFIG,
    RasterConfig,
    RenderOutput,
    render,
    render_backward,
    render_oracle,
)

__version__ = "0.1.0"

__all__ = [
    "Camera", "look_at", "FrozenSplats", "GaussianLevelSet", "MultiLevelModel",
    "clone_level", "covariance", "effective_scale", "init_next_level", "opacity",
    "scale_constraint", "BACKEND", "DEFAULT_CONFIG", "SMOOTH_CONFIG", "RasterConfig",
    "RenderOutput", "render", "render_backward", "render_oracle", "__version__",
]
