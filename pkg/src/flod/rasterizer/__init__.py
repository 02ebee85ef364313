"""Deterministic forward renderer and analytic backward pass.

Per pixel, projected Gaussians are composited front to back in a canonical
order (depth ascending, source index breaking ties), so the tiled renderer,
the naive oracle and both compositing backends produce bit-identical images.
All internal math is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..camera import Camera
from ..model import FrozenSplats, GaussianLevelSet
from ._backend import BACKEND, get_kernels, kernels
from .projection import (
    RADIUS_SIGMA,
    ProjectedGaussian,
    ProjectionArrays,
    project,
    project_arrays,
    projection_backward,
)

__all__ = [
    "BACKEND", "RasterConfig", "DEFAULT_CONFIG", "SMOOTH_CONFIG", "RenderOutput",
    "RenderGradients", "ContractViolation", "ProjectedGaussian", "project",
    "render", "render_backward", "render_oracle", "get_kernels",
]


class ContractViolation(ValueError):
    """Forward/backward inputs do not describe the same pass."""


@dataclass(frozen=True)
class RasterConfig:
    """Compositing conventions inherited from the backbone method.

    The smooth variant (thresholds off, full rectangles) makes the render a
    differentiable function of every parameter, which finite-difference
    checks require.
    """

    alpha_clamp: float = 0.99
    alpha_skip: float = 1.0 / 255.0
    transmittance_stop: float = 1e-4
    dilation: float = 0.3
    tile_size: int = 16
    full_rects: bool = False


DEFAULT_CONFIG = RasterConfig()
SMOOTH_CONFIG = RasterConfig(alpha_skip=0.0, transmittance_stop=0.0, full_rects=True)


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]-ish (background + premultiplied colors)
    acc_opacity: np.ndarray  # (H, W), 1 - final transmittance
    blend_count: np.ndarray  # (H, W) int32, composited Gaussians per pixel


@dataclass
class RenderGradients:
    """Gradients w.r.t. the raw (stored) per-Gaussian parameters."""

    positions: np.ndarray
    scale_params: np.ndarray
    rotations: np.ndarray
    opacity_params: np.ndarray
    colors: np.ndarray
    screen_grad: np.ndarray  # (N, 2) d<upstream,image>/d mu2d, pixel units
    visible: np.ndarray  # (N,) bool, survived projection culling


def _as_splats(source) -> FrozenSplats:
    if isinstance(source, FrozenSplats):
        return source
    if isinstance(source, GaussianLevelSet):
        return source.activate()
    raise TypeError(f"cannot render a {type(source).__name__}")


def _canonical_order(proj: ProjectionArrays) -> np.ndarray:
    """Indices of valid Gaussians sorted by (depth, source index)."""
    valid_idx = np.nonzero(proj.valid)[0]
    if len(valid_idx) == 0:
        return valid_idx
    order = np.lexsort((valid_idx, proj.depth[valid_idx]))
    return valid_idx[order]


def _gather(splats: FrozenSplats, proj: ProjectionArrays, order: np.ndarray):
    c = np.ascontiguousarray
    return (
        c(proj.mu2d[order, 0]), c(proj.mu2d[order, 1]),
        c(proj.conic[order, 0]), c(proj.conic[order, 1]), c(proj.conic[order, 2]),
        c(splats.opacities[order]),
        c(splats.colors[order, 0]), c(splats.colors[order, 1]), c(splats.colors[order, 2]),
        c(proj.rect[order, 0]), c(proj.rect[order, 1]),
        c(proj.rect[order, 2]), c(proj.rect[order, 3]),
    )


def _background(background) -> tuple[float, float, float]:
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    return float(bg[0]), float(bg[1]), float(bg[2])


def render(source, cam: Camera, background=(0.0, 0.0, 0.0),
           config: RasterConfig = DEFAULT_CONFIG, *, backend=None) -> RenderOutput:
    """Tiled forward render. Deterministic: identical inputs, identical bits."""
    splats = _as_splats(source)
    proj = project_arrays(splats, cam, dilation=config.dilation, full_rects=config.full_rects)
    order = _canonical_order(proj)
    args = _gather(splats, proj, order)
    bg_r, bg_g, bg_b = _background(background)

    rgb = np.zeros((cam.height, cam.width, 3))
    acc = np.zeros((cam.height, cam.width))
    cnt = np.zeros((cam.height, cam.width), dtype=np.int32)
    kern = kernels if backend is None else get_kernels(backend)
    kern.forward_composite(
        *args, cam.width, cam.height, config.tile_size, bg_r, bg_g, bg_b,
        config.alpha_clamp, config.alpha_skip, config.transmittance_stop,
        rgb, acc, cnt,
    )
    return RenderOutput(rgb=rgb, acc_opacity=acc, blend_count=cnt)


def render_oracle(source, cam: Camera, background=(0.0, 0.0, 0.0),
                  config: RasterConfig = DEFAULT_CONFIG) -> RenderOutput:
    """Reference renderer: per-pixel loop over the globally sorted Gaussians.

    No tiles and no shared compositing code with render(); only the
    projection and the canonical sort are common. Candidates are prefiltered
    by the same per-Gaussian rectangles the contract defines (outside a
    rectangle the contribution is provably below the alpha-skip threshold).
    """
    splats = _as_splats(source)
    proj = project_arrays(splats, cam, dilation=config.dilation, full_rects=config.full_rects)
    order = _canonical_order(proj)
    (mu_x, mu_y, con_a, con_b, con_c, opac,
     col_r, col_g, col_b, rx0, ry0, rx1, ry1) = _gather(splats, proj, order)
    bg_r, bg_g, bg_b = _background(background)
    alpha_clamp = config.alpha_clamp
    alpha_skip = config.alpha_skip
    transm_stop = config.transmittance_stop

    mu_x_l = mu_x.tolist()
    mu_y_l = mu_y.tolist()
    con_a_l = con_a.tolist()
    con_b_l = con_b.tolist()
    con_c_l = con_c.tolist()
    opac_l = opac.tolist()
    col_r_l = col_r.tolist()
    col_g_l = col_g.tolist()
    col_b_l = col_b.tolist()

    rgb = np.zeros((cam.height, cam.width, 3))
    acc = np.zeros((cam.height, cam.width))
    cnt = np.zeros((cam.height, cam.width), dtype=np.int32)
    exp = math.exp
    for yy in range(cam.height):
        row_hit = (ry0 <= yy) & (yy <= ry1)
        for xx in range(cam.width):
            candidates = np.nonzero(row_hit & (rx0 <= xx) & (xx <= rx1))[0]
            t_cur = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            n = 0
            for m in candidates.tolist():
                dx = xx - mu_x_l[m]
                dy = yy - mu_y_l[m]
                power = -0.5 * (con_a_l[m] * dx * dx + con_c_l[m] * dy * dy) - con_b_l[m] * dx * dy
                if power > 0.0:
                    continue
                alpha = opac_l[m] * exp(power)
                if alpha > alpha_clamp:
                    alpha = alpha_clamp
                if alpha < alpha_skip:
                    continue
                test_t = t_cur * (1.0 - alpha)
                if test_t < transm_stop:
                    break
                r += t_cur * alpha * col_r_l[m]
                g += t_cur * alpha * col_g_l[m]
                b += t_cur * alpha * col_b_l[m]
                t_cur = test_t
                n += 1
            rgb[yy, xx, 0] = r + t_cur * bg_r
            rgb[yy, xx, 1] = g + t_cur * bg_g
            rgb[yy, xx, 2] = b + t_cur * bg_b
            acc[yy, xx] = 1.0 - t_cur
            cnt[yy, xx] = n
    return RenderOutput(rgb=rgb, acc_opacity=acc, blend_count=cnt)


def render_backward(level_set: GaussianLevelSet, cam: Camera, background,
                    upstream_grad: np.ndarray, config: RasterConfig = DEFAULT_CONFIG,
                    *, backend=None) -> RenderGradients:
    """Gradients of <upstream_grad, render(level_set, cam, background)>.

    Recomputes per-pixel transmittance front to back instead of storing it;
    chains through the scale and opacity activations and quaternion
    normalization, so the returned gradients apply to the stored parameters.
    """
    if not isinstance(level_set, GaussianLevelSet):
        raise TypeError("render_backward differentiates stored parameters; needs a GaussianLevelSet")
    upstream = np.asarray(upstream_grad, dtype=np.float64)
    if upstream.shape != (cam.height, cam.width, 3):
        raise ContractViolation(
            f"upstream gradient shape {upstream.shape} does not match the forward "
            f"image ({cam.height}, {cam.width}, 3)")
    splats = level_set.activate()
    n = len(splats)
    proj = project_arrays(splats, cam, dilation=config.dilation, full_rects=config.full_rects)
    order = _canonical_order(proj)
    args = _gather(splats, proj, order)
    bg_r, bg_g, bg_b = _background(background)

    m_count = len(order)
    d_mu_x = np.zeros(m_count)
    d_mu_y = np.zeros(m_count)
    d_con = np.zeros((3, m_count))
    d_opac_srt = np.zeros(m_count)
    d_col = np.zeros((3, m_count))
    kern = kernels if backend is None else get_kernels(backend)
    kern.backward_composite(
        *args, cam.width, cam.height, config.tile_size, bg_r, bg_g, bg_b,
        config.alpha_clamp, config.alpha_skip, config.transmittance_stop,
        np.ascontiguousarray(upstream),
        d_mu_x, d_mu_y, d_con[0], d_con[1], d_con[2],
        d_opac_srt, d_col[0], d_col[1], d_col[2],
    )

    # scatter back to source order
    d_mu2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opac_act = np.zeros(n)
    d_colors = np.zeros((n, 3))
    d_mu2d[order, 0] = d_mu_x
    d_mu2d[order, 1] = d_mu_y
    d_conic[order, 0] = d_con[0]
    d_conic[order, 1] = d_con[1]
    d_conic[order, 2] = d_con[2]
    d_opac_act[order] = d_opac_srt
    d_colors[order, 0] = d_col[0]
    d_colors[order, 1] = d_col[1]
    d_colors[order, 2] = d_col[2]

    d_pos, d_scale_act, d_quat_unit = projection_backward(splats, cam, proj, d_mu2d, d_conic)

    # activation chain: s = exp(s_opt) + s_min, o = sigmoid(o_logit), q_hat = q/|q|
    d_scale_params = d_scale_act * (splats.scales - level_set.s_min)
    o = splats.opacities
    d_opacity_params = d_opac_act * o * (1.0 - o)
    q_raw = level_set.rotations
    norms = np.sqrt(np.sum(q_raw * q_raw, axis=1, keepdims=True))
    q_hat = q_raw / norms
    inner = np.sum(q_hat * d_quat_unit, axis=1, keepdims=True)
    d_rotations = (d_quat_unit - q_hat * inner) / norms

    return RenderGradients(
        positions=d_pos,
        scale_params=d_scale_params,
        rotations=d_rotations,
        opacity_params=d_opacity_params,
        colors=d_colors,
        screen_grad=d_mu2d,
        visible=proj.valid.copy(),
    )
