import numpy as np
import pytest

from flod.camera import look_at
from flod.model import GaussianLevelSet


def random_level_set(rng: np.random.Generator, n: int, *, s_min: float = 0.0,
                     level: int = 1, scale_range=(0.05, 0.35),
                     opacity_range=(-1.5, 1.5)) -> GaussianLevelSet:
    """Random scene bounded away from the alpha clamp (opacity <= ~0.82)."""
    return GaussianLevelSet(
        positions=rng.uniform(-0.45, 0.45, (n, 3)),
        scale_params=rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]), (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        opacity_params=rng.uniform(*opacity_range, n),
        colors=rng.uniform(0.0, 1.0, (n, 3)),
        s_min=s_min,
        level=level,
    )


def ring_camera(angle: float, *, radius: float = 2.6, elevation: float = 0.3,
                fx: float = 64.0, size: int = 64):
    pos = (radius * np.cos(angle), elevation, radius * np.sin(angle))
    return look_at(pos, (0.0, 0.0, 0.0), fx=fx, width=size, height=size)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def has_compiled_backend() -> bool:
    try:
        from flod.rasterizer import _compose  # noqa: F401
        return True
    except ImportError:
        return False
