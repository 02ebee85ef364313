"""Scale-constrained Gaussian sets and the multi-level model built from them.

Each level stores raw (unconstrained) parameters; activation maps them to
render-ready quantities. The one non-standard activation is the scale: the
effective scale is ``exp(scale_params) + s_min`` so a level's Gaussians can
never shrink below the level's scale floor.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

QUAT_TOL = 1e-6
SCALE_FLOOR = 1e-12  # clamp for log() when re-encoding scales across levels


def scale_constraint(level: int, tau: float, rho: float, l_max: int) -> float:
    """Scale floor for a level: tau * rho**(1 - level), and 0 at the top level."""
    if not 1 <= level <= l_max:
        raise ValueError(f"level {level} out of range [1, {l_max}]")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if rho <= 1:
        raise ValueError("rho must be > 1")
    if level == l_max:
        return 0.0
    return tau * rho ** (1.0 - level)


def effective_scale(scale_params: np.ndarray, s_min: float) -> np.ndarray:
    """Componentwise exp(scale_params) + s_min; always strictly above s_min."""
    return np.exp(scale_params) + s_min


def opacity(opacity_params: np.ndarray | float) -> np.ndarray | float:
    """Sigmoid activation mapping the stored logit to (0, 1)."""
    return 1.0 / (1.0 + np.exp(-np.asarray(opacity_params, dtype=np.float64)))


def opacity_logit(o: np.ndarray | float) -> np.ndarray | float:
    o = np.asarray(o, dtype=np.float64)
    return np.log(o) - np.log1p(-o)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z). Works on (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    m[..., 0, 1] = 2.0 * (x * y - w * z)
    m[..., 0, 2] = 2.0 * (x * z + w * y)
    m[..., 1, 0] = 2.0 * (x * y + w * z)
    m[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    m[..., 1, 2] = 2.0 * (y * z - w * x)
    m[..., 2, 0] = 2.0 * (x * z - w * y)
    m[..., 2, 1] = 2.0 * (y * z + w * x)
    m[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return m


def covariance(s: np.ndarray, q: np.ndarray) -> np.ndarray:
    """3x3 covariance R diag(s) diag(s)^T R^T from scale vector and quaternion.

    A quaternion off unit norm by more than QUAT_TOL is normalized internally
    and flagged at debug level.
    """
    s = np.asarray(s, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("scales must be strictly positive")
    norm = np.sqrt(np.sum(q * q))
    if abs(norm - 1.0) > QUAT_TOL:
        log.debug("covariance(): non-unit quaternion (|q|=%.9g), normalizing", norm)
    q = q / norm
    r = quat_to_rotmat(q)
    rs = r * s[np.newaxis, :]  # R @ diag(s)
    return rs @ rs.T


@dataclass
class GaussianLevelSet:
    """One level's Gaussians: raw parameter arrays plus the level's scale floor.

    positions       (N, 3) float64, world units
    scale_params    (N, 3) float64, log-domain offsets
    rotations       (N, 4) float64, quaternions wxyz (kept unit-norm by the trainer)
    opacity_params  (N,)   float64, logits
    colors          (N, 3) float64 in [0, 1]
    """

    positions: np.ndarray
    scale_params: np.ndarray
    rotations: np.ndarray
    opacity_params: np.ndarray
    colors: np.ndarray
    s_min: float
    level: int

    def __post_init__(self):
        n = len(self.positions)
        for name in ("positions", "scale_params", "rotations", "opacity_params", "colors"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            setattr(self, name, arr)
            if len(arr) != n:
                raise ValueError(f"attribute array {name} has length {len(arr)}, expected {n}")
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must be (N, 3)")
        if self.rotations.ndim != 2 or self.rotations.shape[1] != 4:
            raise ValueError("rotations must be (N, 4)")
        if self.s_min < 0:
            raise ValueError("s_min must be >= 0")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def effective_scales(self) -> np.ndarray:
        return effective_scale(self.scale_params, self.s_min)

    @property
    def opacities(self) -> np.ndarray:
        return opacity(self.opacity_params)

    def unit_rotations(self) -> np.ndarray:
        norms = np.sqrt(np.sum(self.rotations * self.rotations, axis=1, keepdims=True))
        return self.rotations / norms

    def activate(self) -> FrozenSplats:
        """Render-ready snapshot: activated scales/opacities, unit quaternions."""
        return FrozenSplats(
            positions=self.positions.copy(),
            scales=self.effective_scales,
            rotations=self.unit_rotations(),
            opacities=self.opacities,
            colors=self.colors.copy(),
        )


@dataclass
class FrozenSplats:
    """Activated, render-ready Gaussian arrays (no level bookkeeping).

    Composites built from several levels concatenate these; each Gaussian
    keeps the effective scale implied by its own level's floor.
    """

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    @staticmethod
    def concatenate(parts: list["FrozenSplats"]) -> "FrozenSplats":
        if not parts:
            return FrozenSplats(
                positions=np.zeros((0, 3)), scales=np.zeros((0, 3)),
                rotations=np.zeros((0, 4)), opacities=np.zeros(0), colors=np.zeros((0, 3)),
            )
        return FrozenSplats(
            positions=np.concatenate([p.positions for p in parts]),
            scales=np.concatenate([p.scales for p in parts]),
            rotations=np.concatenate([p.rotations for p in parts]),
            opacities=np.concatenate([p.opacities for p in parts]),
            colors=np.concatenate([p.colors for p in parts]),
        )


def clone_level(level_set: GaussianLevelSet) -> GaussianLevelSet:
    """Deep copy; mutating the original never touches the clone."""
    return GaussianLevelSet(
        positions=level_set.positions.copy(),
        scale_params=level_set.scale_params.copy(),
        rotations=level_set.rotations.copy(),
        opacity_params=level_set.opacity_params.copy(),
        colors=level_set.colors.copy(),
        s_min=level_set.s_min,
        level=level_set.level,
    )


def init_next_level(prev: GaussianLevelSet, s_min_next: float) -> GaussianLevelSet:
    """Re-encode a trained level under the next (smaller) scale floor.

    The new scale_params are log(effective_scale - s_min_next), so the
    effective scale is unchanged and the first render after the transition
    matches the last render before it. Components that would go non-positive
    under the log are clamped to SCALE_FLOOR and counted.
    """
    if s_min_next >= prev.s_min:
        raise ValueError(f"s_min_next={s_min_next} must be < prev.s_min={prev.s_min}")
    gap = prev.effective_scales - s_min_next
    clamped = gap < SCALE_FLOOR
    n_clamped = int(np.count_nonzero(clamped))
    if n_clamped:
        log.debug("init_next_level: clamped %d scale components to %g", n_clamped, SCALE_FLOOR)
        gap = np.maximum(gap, SCALE_FLOOR)
    out = GaussianLevelSet(
        positions=prev.positions.copy(),
        scale_params=np.log(gap),
        rotations=prev.rotations.copy(),
        opacity_params=prev.opacity_params.copy(),
        colors=prev.colors.copy(),
        s_min=s_min_next,
        level=prev.level + 1,
    )
    out.transition_clamped = n_clamped  # diagnostic counter
    return out


@dataclass
class MultiLevelModel:
    """The full multi-level structure: one GaussianLevelSet per level 1..l_max."""

    levels: list[GaussianLevelSet]
    tau: float
    rho: float
    l_max: int

    def __post_init__(self):
        if len(self.levels) != self.l_max:
            raise ValueError(f"expected {self.l_max} levels, got {len(self.levels)}")
        for i, lv in enumerate(self.levels, start=1):
            want = scale_constraint(i, self.tau, self.rho, self.l_max)
            if lv.level != i:
                raise ValueError(f"level index mismatch at position {i}: {lv.level}")
            if lv.s_min != want:
                raise ValueError(f"level {i} s_min {lv.s_min} != scale_constraint {want}")

    def level(self, l: int) -> GaussianLevelSet:
        if not 1 <= l <= self.l_max:
            raise ValueError(f"level {l} out of range [1, {self.l_max}]")
        return self.levels[l - 1]

    def counts(self) -> list[int]:
        return [len(lv) for lv in self.levels]


def deep_copy_model(model: MultiLevelModel) -> MultiLevelModel:
    return MultiLevelModel(
        levels=[clone_level(lv) for lv in model.levels],
        tau=model.tau, rho=model.rho, l_max=model.l_max,
    )
