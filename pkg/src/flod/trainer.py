"""Level-by-level training loop.

Level 1 starts from the scene's initial points; each further level is
re-initialized from the fully trained previous level with the effective
scale preserved. Within a level, density control (densify + prune, overlap
prune, opacity reset) runs only inside the level's horizon, on a schedule
derived purely from the config so the emitted event log is reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .camera import Camera
from .metrics import ssim_with_grad
from .model import (
    SCALE_FLOOR,
    GaussianLevelSet,
    MultiLevelModel,
    clone_level,
    init_next_level,
    opacity_logit,
    quat_to_rotmat,
    scale_constraint,
)
from .neighbors import below_threshold_mask
from .rasterizer import DEFAULT_CONFIG, RasterConfig, render, render_backward

S_OPT_MIN = -30.0  # keeps exp(s_opt) strictly positive in float64


class InitializationError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class SceneDataset:
    """Posed ground-truth views plus initial points (SfM substitute)."""

    train_views: list  # [(Camera, image (H,W,3) float64)]
    test_views: list
    points: np.ndarray  # (N, 3)
    point_colors: np.ndarray  # (N, 3) in [0, 1]
    extent: float = 0.0

    def __post_init__(self):
        if len(self.train_views) < 1:
            raise ValueError("need at least one training view")
        for cam, img in list(self.train_views) + list(self.test_views):
            if img.shape != (cam.height, cam.width, 3):
                raise ValueError(
                    f"image shape {img.shape} does not match camera "
                    f"({cam.height}, {cam.width}, 3)")
        if self.extent <= 0.0:
            self.extent = scene_extent([c for c, _ in self.train_views])


def scene_extent(cameras: list[Camera]) -> float:
    """Radius of the bounding sphere (around the centroid) of camera centers."""
    centers = np.stack([c.position for c in cameras])
    centroid = centers.mean(axis=0)
    radius = float(np.max(np.linalg.norm(centers - centroid, axis=1)))
    return max(radius, 1e-3)


@dataclass
class TrainConfig:
    """Per-level schedules and density-control constants.

    Tuples are indexed by level (1-based); they must cover l_max entries.
    """

    iterations: tuple = (10_000, 15_000, 20_000, 25_000, 30_000)
    density_horizons: tuple = (5_000, 6_000, 8_000, 10_000, 15_000)
    densify_intervals: tuple = (2_000, 1_000, 500, 500, 200)
    overlap_prune_interval: int = 1_000
    opacity_reset_interval: int = 3_000
    densify_grad_threshold: float = 2e-4
    split_scale_frac: float = 0.01
    prune_opacity: float = 0.005
    opacity_reset_value: float = 0.01
    split_factor: float = 1.6
    clone_offset_frac: float = 0.05
    lr_position_init_frac: float = 1.6e-4
    lr_position_final_frac: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 0.05
    lr_color: float = 2.5e-3
    lambda_ssim: float = 0.2
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    raster: RasterConfig = DEFAULT_CONFIG

    def __post_init__(self):
        if self.overlap_prune_interval < 1 or self.opacity_reset_interval < 1:
            raise ValueError("intervals must be >= 1")
        if any(i < 1 for i in self.densify_intervals):
            raise ValueError("densify intervals must be >= 1")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ValueError("lambda_ssim must be in [0, 1]")
        for h, t in zip(self.density_horizons, self.iterations):
            if h > t:
                raise ValueError(f"density horizon {h} exceeds iteration total {t}")

    def level_iterations(self, level: int) -> int:
        return int(self.iterations[level - 1])

    def level_horizon(self, level: int) -> int:
        return int(self.density_horizons[level - 1])

    def level_densify_interval(self, level: int) -> int:
        return int(self.densify_intervals[level - 1])

    def validate_for(self, l_max: int) -> None:
        if len(self.iterations) < l_max or len(self.density_horizons) < l_max \
                or len(self.densify_intervals) < l_max:
            raise ValueError(f"config schedules do not cover l_max={l_max} levels")

    def digest_dict(self) -> dict:
        return {
            "iterations": list(self.iterations),
            "density_horizons": list(self.density_horizons),
            "densify_intervals": list(self.densify_intervals),
            "overlap_prune_interval": self.overlap_prune_interval,
            "opacity_reset_interval": self.opacity_reset_interval,
            "densify_grad_threshold": self.densify_grad_threshold,
            "split_scale_frac": self.split_scale_frac,
            "prune_opacity": self.prune_opacity,
            "opacity_reset_value": self.opacity_reset_value,
            "split_factor": self.split_factor,
            "clone_offset_frac": self.clone_offset_frac,
            "lr_position_init_frac": self.lr_position_init_frac,
            "lr_position_final_frac": self.lr_position_final_frac,
            "lr_scale": self.lr_scale,
            "lr_rotation": self.lr_rotation,
            "lr_opacity": self.lr_opacity,
            "lr_color": self.lr_color,
            "lambda_ssim": self.lambda_ssim,
            "background": list(self.background),
            "seed": self.seed,
        }


def desk_scale_config(seed: int = 0, **overrides) -> TrainConfig:
    """Schedule for minutes-scale runs on synthetic scenes (l_max <= 3).

    Learning rates are hotter than the backbone defaults; with only
    hundreds of iterations per level the tiny scenes need them to converge.
    """
    base = dict(
        iterations=(500, 750, 1000),
        density_horizons=(250, 375, 500),
        densify_intervals=(150, 150, 200),
        overlap_prune_interval=125,
        lr_position_init_frac=8e-4,
        lr_position_final_frac=8e-6,
        lr_scale=0.02,
        lr_rotation=4e-3,
        lr_opacity=0.1,
        lr_color=0.02,
        seed=seed,
    )
    base.update(overrides)
    return TrainConfig(**base)


def density_control_schedule(cfg: TrainConfig, level: int, l_max: int) -> dict[int, tuple]:
    """iteration -> ordered ops, derived purely from the config.

    Ops fire only inside the level's horizon; overlap pruning never runs at
    the top level. Order within an iteration: densify_prune, overlap_prune,
    opacity_reset.
    """
    total = cfg.level_iterations(level)
    horizon = cfg.level_horizon(level)
    interval = cfg.level_densify_interval(level)
    sched: dict[int, tuple] = {}
    for i in range(1, total + 1):
        if i > horizon:
            break
        ops = []
        if i % interval == 0:
            ops.append("densify_prune")
        if level < l_max and i % cfg.overlap_prune_interval == 0:
            ops.append("overlap_prune")
        if i % cfg.opacity_reset_interval == 0:
            ops.append("opacity_reset")
        if ops:
            sched[i] = tuple(ops)
    return sched


# ---------------------------------------------------------------------------
# optimizer

_GROUPS = ("positions", "scale_params", "rotations", "opacity_params", "colors")


class Adam:
    """First-order adaptive-moment optimizer over the five attribute groups."""

    def __init__(self, state: GaussianLevelSet, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {g: np.zeros_like(getattr(state, g)) for g in _GROUPS}
        self.v = {g: np.zeros_like(getattr(state, g)) for g in _GROUPS}

    def step(self, state: GaussianLevelSet, grads, lrs: dict[str, float]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for grp in _GROUPS:
            grad = getattr(grads, grp)
            if not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite gradient in group {grp}")
            m = self.m[grp]
            v = self.v[grp]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (grad * grad)
            arr = getattr(state, grp)
            arr -= lrs[grp] * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def keep(self, mask: np.ndarray) -> None:
        for grp in _GROUPS:
            self.m[grp] = self.m[grp][mask]
            self.v[grp] = self.v[grp][mask]

    def append_zeros(self, count: int) -> None:
        for grp in _GROUPS:
            pad = np.zeros((count,) + self.m[grp].shape[1:])
            self.m[grp] = np.concatenate([self.m[grp], pad])
            self.v[grp] = np.concatenate([self.v[grp], pad])

    def zero_group(self, grp: str) -> None:
        self.m[grp][...] = 0.0
        self.v[grp][...] = 0.0

    def state_dict(self) -> dict:
        out = {"t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}
        for grp in _GROUPS:
            out[f"m_{grp}"] = self.m[grp]
            out[f"v_{grp}"] = self.v[grp]
        return out

    @classmethod
    def from_state_dict(cls, state: GaussianLevelSet, d: dict) -> "Adam":
        opt = cls(state, beta1=float(d["beta1"]), beta2=float(d["beta2"]), eps=float(d["eps"]))
        opt.t = int(d["t"])
        for grp in _GROUPS:
            opt.m[grp] = np.array(d[f"m_{grp}"], dtype=np.float64)
            opt.v[grp] = np.array(d[f"v_{grp}"], dtype=np.float64)
        return opt


def position_lr(cfg: TrainConfig, extent: float, iteration: int, total: int) -> float:
    """Exponential decay from init to final over the level's iterations."""
    lo = cfg.lr_position_final_frac * extent
    hi = cfg.lr_position_init_frac * extent
    if total <= 1:
        return hi
    u = (iteration - 1) / (total - 1)
    return hi * (lo / hi) ** u


def _project_constraints(state: GaussianLevelSet) -> None:
    """Post-step projections: unit quaternions, colors in [0,1], bounded s_opt."""
    q = state.rotations
    q /= np.sqrt(np.sum(q * q, axis=1, keepdims=True))
    np.clip(state.colors, 0.0, 1.0, out=state.colors)
    np.maximum(state.scale_params, S_OPT_MIN, out=state.scale_params)


def optimizer_step(state: GaussianLevelSet, grads, adam: Adam, cfg: TrainConfig,
                   extent: float, iteration: int, total: int) -> GaussianLevelSet:
    lrs = {
        "positions": position_lr(cfg, extent, iteration, total),
        "scale_params": cfg.lr_scale,
        "rotations": cfg.lr_rotation,
        "opacity_params": cfg.lr_opacity,
        "colors": cfg.lr_color,
    }
    adam.step(state, grads, lrs)
    _project_constraints(state)
    return state


# ---------------------------------------------------------------------------
# loss

def loss(rendered: np.ndarray, gt: np.ndarray, lambda_ssim: float):
    """(1-lambda)*L1 + lambda*(1-SSIM); returns (value, d value / d rendered)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {gt.shape}")
    diff = rendered - gt
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    if lambda_ssim > 0.0:
        ssim_val, ssim_grad = ssim_with_grad(rendered, gt)
        value = (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - ssim_val)
        grad = grad - lambda_ssim * ssim_grad
    else:
        value = l1
    return value, grad


# ---------------------------------------------------------------------------
# density control

@dataclass
class GradStats:
    """Accumulated screen-space positional gradients since the last densify."""

    accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradStats":
        return cls(accum=np.zeros(n), count=np.zeros(n))

    def update(self, grads, width: int, height: int) -> None:
        gx = grads.screen_grad[:, 0] * (0.5 * width)
        gy = grads.screen_grad[:, 1] * (0.5 * height)
        norm = np.sqrt(gx * gx + gy * gy)
        vis = grads.visible
        self.accum[vis] += norm[vis]
        self.count[vis] += 1.0

    def mean(self) -> np.ndarray:
        return self.accum / np.maximum(self.count, 1.0)


def _sampled_offsets(state: GaussianLevelSet, idx: np.ndarray, rng: np.random.Generator,
                     scale_frac: float = 1.0) -> np.ndarray:
    """Offsets drawn from each selected Gaussian's own distribution."""
    eps = rng.standard_normal((len(idx), 3))
    s = state.effective_scales[idx]
    rot = quat_to_rotmat(state.unit_rotations()[idx])
    local = eps * s
    return scale_frac * np.einsum("nij,nj->ni", rot, local)


def _reencode_scale(effective: np.ndarray, s_min: float) -> np.ndarray:
    return np.log(np.maximum(effective - s_min, SCALE_FLOOR))


def densify_and_prune(state: GaussianLevelSet, stats: GradStats, cfg: TrainConfig,
                      extent: float, rng: np.random.Generator,
                      adam: Adam | None = None):
    """Clone small / split large high-gradient Gaussians, prune transparent ones.

    Size is never a removal criterion. Returns (new_state, counts).
    """
    mean_grad = stats.mean()
    hi = mean_grad >= cfg.densify_grad_threshold
    eff = state.effective_scales
    max_scale = eff.max(axis=1)
    size_cut = cfg.split_scale_frac * extent
    clone_mask = hi & (max_scale < size_cut)
    split_mask = hi & (max_scale >= size_cut)

    clone_idx = np.nonzero(clone_mask)[0]
    split_idx = np.nonzero(split_mask)[0]

    new_rows = {g: [] for g in _GROUPS}
    if len(clone_idx):
        offs = _sampled_offsets(state, clone_idx, rng, cfg.clone_offset_frac)
        new_rows["positions"].append(state.positions[clone_idx] + offs)
        new_rows["scale_params"].append(state.scale_params[clone_idx].copy())
        new_rows["rotations"].append(state.rotations[clone_idx].copy())
        new_rows["opacity_params"].append(state.opacity_params[clone_idx].copy())
        new_rows["colors"].append(state.colors[clone_idx].copy())
    if len(split_idx):
        child_scale = _reencode_scale(eff[split_idx] / cfg.split_factor, state.s_min)
        for _ in range(2):
            offs = _sampled_offsets(state, split_idx, rng)
            new_rows["positions"].append(state.positions[split_idx] + offs)
            new_rows["scale_params"].append(child_scale.copy())
            new_rows["rotations"].append(state.rotations[split_idx].copy())
            new_rows["opacity_params"].append(state.opacity_params[split_idx].copy())
            new_rows["colors"].append(state.colors[split_idx].copy())

    keep = ~split_mask  # split originals are replaced by their children
    merged = {}
    for grp in _GROUPS:
        parts = [getattr(state, grp)[keep]] + new_rows[grp]
        merged[grp] = np.concatenate(parts) if len(parts) > 1 else parts[0]
    if adam is not None:
        adam.keep(keep)
        adam.append_zeros(sum(len(p) for p in new_rows["positions"]))

    mid = GaussianLevelSet(s_min=state.s_min, level=state.level, **merged)
    low_opacity = mid.opacities < cfg.prune_opacity
    pruned = int(np.count_nonzero(low_opacity))
    if pruned:
        keep2 = ~low_opacity
        for grp in _GROUPS:
            merged[grp] = merged[grp][keep2]
        if adam is not None:
            adam.keep(keep2)
        mid = GaussianLevelSet(s_min=state.s_min, level=state.level, **merged)
    counts = {"cloned": len(clone_idx), "split": len(split_idx), "pruned": pruned}
    return mid, counts


def overlap_prune(state: GaussianLevelSet, adam: Adam | None = None):
    """Remove Gaussians whose mean 3-NN distance is below s_min / 2.

    Distances are measured on the pre-prune set; removals are simultaneous.
    """
    d_op = state.s_min / 2.0
    mask = below_threshold_mask(state.positions, d_op, k=3)
    removed = int(np.count_nonzero(mask))
    if removed == 0:
        return state, 0
    keep = ~mask
    new_state = GaussianLevelSet(
        s_min=state.s_min, level=state.level,
        **{g: getattr(state, g)[keep] for g in _GROUPS})
    if adam is not None:
        adam.keep(keep)
    return new_state, removed


def opacity_reset(state: GaussianLevelSet, reset_value: float = 0.01,
                  adam: Adam | None = None) -> GaussianLevelSet:
    """Cap opacity at reset_value (opacity = min(current, reset_value))."""
    cap = float(opacity_logit(reset_value))
    np.minimum(state.opacity_params, cap, out=state.opacity_params)
    if adam is not None:
        adam.zero_group("opacity_params")  # backbone convention after resets
    return state


# ---------------------------------------------------------------------------
# level initialization

def init_level_one(points: np.ndarray, point_colors: np.ndarray, s_min: float) -> GaussianLevelSet:
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise InitializationError("empty initial point set")
    n = len(points)
    if n >= 4:
        dist, _ = cKDTree(points).query(points, k=4)
        nn = np.mean(dist[:, 1:], axis=1)
    elif n >= 2:
        dist, _ = cKDTree(points).query(points, k=n)
        nn = np.mean(dist[:, 1:], axis=1)
    else:
        nn = np.full(n, 0.1)
    scale_params = np.log(np.clip(nn, 1e-7, None))[:, np.newaxis].repeat(3, axis=1)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianLevelSet(
        positions=points.copy(),
        scale_params=scale_params,
        rotations=rotations,
        opacity_params=np.full(n, float(opacity_logit(0.1))),
        colors=np.clip(np.asarray(point_colors, dtype=np.float64), 0.0, 1.0),
        s_min=s_min,
        level=1,
    )


# ---------------------------------------------------------------------------
# training loops

@dataclass
class TrainStats:
    """Cross-level run statistics and the machine-readable event log."""

    events: list = field(default_factory=list)
    min_scale_margin: float = math.inf  # min over iterations of min(exp(s_opt))
    constraint_violations: int = 0
    iterations_logged: int = 0
    final_losses: dict = field(default_factory=dict)

    def record_margin(self, state: GaussianLevelSet) -> None:
        margin = float(np.min(np.exp(state.scale_params))) if len(state) else math.inf
        eff_ok = bool(np.all(state.effective_scales > state.s_min)) if len(state) else True
        self.min_scale_margin = min(self.min_scale_margin, margin)
        self.iterations_logged += 1
        if margin <= 0.0 or not eff_ok:
            self.constraint_violations += 1

    def event(self, kind: str, iteration: int, level: int, **counts) -> dict:
        rec = {"event": kind, "iteration": iteration, "level": level, **counts}
        self.events.append(rec)
        return rec


def train_level(state: GaussianLevelSet, scene: SceneDataset, cfg: TrainConfig,
                level: int, l_max: int, rng: np.random.Generator,
                *, adam: Adam | None = None, start_iteration: int = 0,
                stop_iteration: int | None = None, grad_stats: GradStats | None = None,
                stats: TrainStats | None = None, sink=None):
    """Optimize one level in place; density control only inside the horizon.

    start/stop_iteration and the passed-in adam/grad_stats/rng allow exact
    resumption from a checkpoint.
    """
    if state.level != level:
        raise ValueError(f"state.level={state.level} does not match level={level}")
    stats = stats if stats is not None else TrainStats()
    adam = adam if adam is not None else Adam(state)
    total = cfg.level_iterations(level)
    stop = total if stop_iteration is None else min(stop_iteration, total)
    sched = density_control_schedule(cfg, level, l_max)
    if grad_stats is None:
        grad_stats = GradStats.zeros(len(state))
    n_views = len(scene.train_views)
    last_loss = math.nan

    for i in range(start_iteration + 1, stop + 1):
        view = int(rng.integers(n_views))
        cam, gt = scene.train_views[view]
        out = render(state, cam, cfg.background, cfg.raster)
        value, dimg = loss(out.rgb, gt, cfg.lambda_ssim)
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at level {level} iteration {i}")
        last_loss = value
        grads = render_backward(state, cam, cfg.background, dimg, cfg.raster)
        grad_stats.update(grads, cam.width, cam.height)
        optimizer_step(state, grads, adam, cfg, scene.extent, i, total)
        stats.record_margin(state)

        for op in sched.get(i, ()):
            if op == "densify_prune":
                state, counts = densify_and_prune(state, grad_stats, cfg,
                                                  scene.extent, rng, adam)
                grad_stats = GradStats.zeros(len(state))
                rec = stats.event("densify", i, level,
                                  cloned=counts["cloned"], split=counts["split"],
                                  count=len(state))
                if sink is not None:
                    sink.event(rec)
                rec = stats.event("prune", i, level, removed=counts["pruned"],
                                  count=len(state))
                if sink is not None:
                    sink.event(rec)
            elif op == "overlap_prune":
                state, removed = overlap_prune(state, adam)
                if removed:
                    grad_stats = GradStats.zeros(len(state))
                rec = stats.event("overlap_prune", i, level, removed=removed,
                                  count=len(state))
                if sink is not None:
                    sink.event(rec)
            elif op == "opacity_reset":
                state = opacity_reset(state, cfg.opacity_reset_value, adam)
                rec = stats.event("opacity_reset", i, level, count=len(state))
                if sink is not None:
                    sink.event(rec)

    stats.final_losses[level] = last_loss
    return state, adam, grad_stats


def train_flod(scene: SceneDataset, cfg: TrainConfig, tau: float, rho: float,
               l_max: int, *, sink=None):
    """Full multi-level run; returns (MultiLevelModel of clones, TrainStats).

    Each level's clone is saved before the next level starts; the working
    state is then re-encoded under the next scale floor.
    """
    cfg.validate_for(l_max)
    if len(scene.points) == 0:
        raise InitializationError("scene has no initial points")
    rng = np.random.default_rng(cfg.seed)
    stats = TrainStats()
    state = init_level_one(scene.points, scene.point_colors,
                           scale_constraint(1, tau, rho, l_max))
    clones: list[GaussianLevelSet] = []
    for level in range(1, l_max + 1):
        state, adam, _ = train_level(state, scene, cfg, level, l_max, rng,
                                     stats=stats, sink=sink)
        rec = stats.event("checkpoint", cfg.level_iterations(level), level,
                          count=len(state))
        if sink is not None:
            sink.event(rec)
            sink.checkpoint(level, state, adam, rng)
        clone = clone_level(state)
        clones.append(clone)
        if sink is not None:
            sink.level_done(level, clone)
        if level < l_max:
            state = init_next_level(state, scale_constraint(level + 1, tau, rho, l_max))
    model = MultiLevelModel(levels=clones, tau=tau, rho=rho, l_max=l_max)
    return model, stats
