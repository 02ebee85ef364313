"""Screen-space projection of 3D Gaussians and its backward chain.

All math is written as explicit component expressions on float64 arrays.
That keeps results independent of BLAS and of which compositing backend is
active, which the bit-exactness contracts rely on.

The 2D covariance is the first-order (EWA) approximation
``sigma2d = J W Sigma W^T J^T`` with a fixed +dilation on the diagonal, where
J is the perspective Jacobian at the Gaussian center and W the
world-to-camera rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..camera import Camera
from ..model import FrozenSplats

# Bounding rectangles use radius_sigma * sqrt(max eigenvalue of sigma2d).
# At 3.5 sigma the opacity contribution is below o_max * exp(-3.5^2/2)
# = 0.99 * 0.002187 < 1/255, so rectangle culling can never drop a
# contribution the alpha-skip test would have kept.
RADIUS_SIGMA = 3.5


@dataclass
class ProjectedGaussian:
    """One Gaussian after projection (contract view of the array form)."""

    mu2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray  # (2, 2) pixel^2, dilation included
    depth: float  # camera-frame z, world units
    source_index: int


class ProjectionArrays:
    """SoA projection output over the full input set.

    valid[i] is False for culled Gaussians (z <= near or degenerate
    covariance); their other entries are unspecified. Rectangles are
    inclusive pixel bounds, already clamped to the image.
    """

    __slots__ = ("valid", "mu2d", "depth", "cov2d", "conic", "radius", "rect",
                 "tx", "ty", "tz", "rmat", "m", "width", "height")

    def __init__(self, n: int, width: int, height: int):
        self.valid = np.zeros(n, dtype=bool)
        self.mu2d = np.zeros((n, 2))
        self.depth = np.zeros(n)
        self.cov2d = np.zeros((n, 3))  # (a, b, c) packed symmetric
        self.conic = np.zeros((n, 3))  # (A, B, C) = inverse, packed
        self.radius = np.zeros(n)
        self.rect = np.zeros((n, 4), dtype=np.int64)  # x0, y0, x1, y1 inclusive
        self.width = width
        self.height = height


def project_arrays(splats: FrozenSplats, cam: Camera, *, dilation: float = 0.3,
                   full_rects: bool = False) -> ProjectionArrays:
    """Project activated Gaussians; cull behind the near plane.

    full_rects=True assigns every valid Gaussian the whole image as its
    rectangle (used by the smooth gradient-check configuration).
    """
    n = len(splats)
    out = ProjectionArrays(n, cam.width, cam.height)
    if n == 0:
        return out

    px, py, pz = splats.positions[:, 0], splats.positions[:, 1], splats.positions[:, 2]
    w = cam.rotation
    t = cam.translation
    tx = w[0, 0] * px + w[0, 1] * py + w[0, 2] * pz + t[0]
    ty = w[1, 0] * px + w[1, 1] * py + w[1, 2] * pz + t[1]
    tz = w[2, 0] * px + w[2, 1] * py + w[2, 2] * pz + t[2]

    valid = tz > cam.near
    safe_tz = np.where(valid, tz, 1.0)

    mu_x = cam.fx * tx / safe_tz + cam.cx
    mu_y = cam.fy * ty / safe_tz + cam.cy

    # world covariance via M = W R(q), V = M diag(s^2) M^T
    q = splats.rotations
    qw, qx, qy, qz = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r00 = 1.0 - 2.0 * (qy * qy + qz * qz)
    r01 = 2.0 * (qx * qy - qw * qz)
    r02 = 2.0 * (qx * qz + qw * qy)
    r10 = 2.0 * (qx * qy + qw * qz)
    r11 = 1.0 - 2.0 * (qx * qx + qz * qz)
    r12 = 2.0 * (qy * qz - qw * qx)
    r20 = 2.0 * (qx * qz - qw * qy)
    r21 = 2.0 * (qy * qz + qw * qx)
    r22 = 1.0 - 2.0 * (qx * qx + qy * qy)

    m00 = w[0, 0] * r00 + w[0, 1] * r10 + w[0, 2] * r20
    m01 = w[0, 0] * r01 + w[0, 1] * r11 + w[0, 2] * r21
    m02 = w[0, 0] * r02 + w[0, 1] * r12 + w[0, 2] * r22
    m10 = w[1, 0] * r00 + w[1, 1] * r10 + w[1, 2] * r20
    m11 = w[1, 0] * r01 + w[1, 1] * r11 + w[1, 2] * r21
    m12 = w[1, 0] * r02 + w[1, 1] * r12 + w[1, 2] * r22
    m20 = w[2, 0] * r00 + w[2, 1] * r10 + w[2, 2] * r20
    m21 = w[2, 0] * r01 + w[2, 1] * r11 + w[2, 2] * r21
    m22 = w[2, 0] * r02 + w[2, 1] * r12 + w[2, 2] * r22

    s0, s1, s2 = splats.scales[:, 0], splats.scales[:, 1], splats.scales[:, 2]
    d0, d1, d2 = s0 * s0, s1 * s1, s2 * s2

    v00 = m00 * m00 * d0 + m01 * m01 * d1 + m02 * m02 * d2
    v01 = m00 * m10 * d0 + m01 * m11 * d1 + m02 * m12 * d2
    v02 = m00 * m20 * d0 + m01 * m21 * d1 + m02 * m22 * d2
    v11 = m10 * m10 * d0 + m11 * m11 * d1 + m12 * m12 * d2
    v12 = m10 * m20 * d0 + m11 * m21 * d1 + m12 * m22 * d2
    v22 = m20 * m20 * d0 + m21 * m21 * d1 + m22 * m22 * d2

    j00 = cam.fx / safe_tz
    j02 = -(cam.fx * tx) / (safe_tz * safe_tz)
    j11 = cam.fy / safe_tz
    j12 = -(cam.fy * ty) / (safe_tz * safe_tz)

    a = j00 * j00 * v00 + 2.0 * j00 * j02 * v02 + j02 * j02 * v22 + dilation
    b = j00 * j11 * v01 + j00 * j12 * v02 + j02 * j11 * v12 + j02 * j12 * v22
    c = j11 * j11 * v11 + 2.0 * j11 * j12 * v12 + j12 * j12 * v22 + dilation

    det = a * c - b * b
    valid = valid & (det > 0)
    safe_det = np.where(det > 0, det, 1.0)

    conic_a = c / safe_det
    conic_b = -b / safe_det
    conic_c = a / safe_det

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - safe_det, 0.0))
    radius = RADIUS_SIGMA * np.sqrt(lam_max)

    if full_rects:
        x0 = np.zeros(n, dtype=np.int64)
        y0 = np.zeros(n, dtype=np.int64)
        x1 = np.full(n, cam.width - 1, dtype=np.int64)
        y1 = np.full(n, cam.height - 1, dtype=np.int64)
    else:
        x0 = np.maximum(np.floor(mu_x - radius), 0).astype(np.int64)
        y0 = np.maximum(np.floor(mu_y - radius), 0).astype(np.int64)
        x1 = np.minimum(np.ceil(mu_x + radius), cam.width - 1).astype(np.int64)
        y1 = np.minimum(np.ceil(mu_y + radius), cam.height - 1).astype(np.int64)
    valid = valid & (x0 <= x1) & (y0 <= y1)

    out.valid = valid
    out.mu2d = np.ascontiguousarray(np.stack([mu_x, mu_y], axis=1))
    out.depth = tz
    out.cov2d = np.ascontiguousarray(np.stack([a, b, c], axis=1))
    out.conic = np.ascontiguousarray(np.stack([conic_a, conic_b, conic_c], axis=1))
    out.radius = radius
    out.rect = np.ascontiguousarray(np.stack([x0, y0, x1, y1], axis=1))
    out.tx, out.ty, out.tz = tx, ty, tz
    out.rmat = (r00, r01, r02, r10, r11, r12, r20, r21, r22)
    out.m = (m00, m01, m02, m10, m11, m12, m20, m21, m22)
    return out


def project(level_set, cam: Camera, *, dilation: float = 0.3) -> list[ProjectedGaussian]:
    """Contract-level projection: culled Gaussians are absent from the result."""
    splats = level_set if isinstance(level_set, FrozenSplats) else level_set.activate()
    arr = project_arrays(splats, cam, dilation=dilation)
    result = []
    for i in np.nonzero(arr.valid)[0]:
        a, b, c = arr.cov2d[i]
        result.append(ProjectedGaussian(
            mu2d=arr.mu2d[i].copy(),
            cov2d=np.array([[a, b], [b, c]]),
            depth=float(arr.depth[i]),
            source_index=int(i),
        ))
    return result


def projection_backward(splats: FrozenSplats, cam: Camera, proj: ProjectionArrays,
                        d_mu2d: np.ndarray, d_conic: np.ndarray):
    """Pull per-Gaussian screen-space gradients back to activated parameters.

    Inputs are gradients w.r.t. mu2d and the packed conic (A, B, C); returns
    (d_positions, d_scales, d_rotations_unit) for the activated arrays. The
    caller chains through activation (exp offset, sigmoid, quaternion
    normalization).
    """
    n = len(splats)
    d_pos = np.zeros((n, 3))
    d_scale = np.zeros((n, 3))
    d_quat = np.zeros((n, 4))
    if n == 0:
        return d_pos, d_scale, d_quat

    valid = proj.valid
    tx, ty, tz = proj.tx, proj.ty, proj.tz
    safe_tz = np.where(valid, tz, 1.0)
    fx, fy = cam.fx, cam.fy
    w = cam.rotation

    q = splats.rotations
    qw, qx, qy, qz = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    s0, s1, s2 = splats.scales[:, 0], splats.scales[:, 1], splats.scales[:, 2]
    d0, d1, d2 = s0 * s0, s1 * s1, s2 * s2
    m00, m01, m02, m10, m11, m12, m20, m21, m22 = proj.m

    # v entries (recomputed; cheaper than stashing six more arrays)
    v00 = m00 * m00 * d0 + m01 * m01 * d1 + m02 * m02 * d2
    v01 = m00 * m10 * d0 + m01 * m11 * d1 + m02 * m12 * d2
    v02 = m00 * m20 * d0 + m01 * m21 * d1 + m02 * m22 * d2
    v11 = m10 * m10 * d0 + m11 * m11 * d1 + m12 * m12 * d2
    v12 = m10 * m20 * d0 + m11 * m21 * d1 + m12 * m22 * d2
    v22 = m20 * m20 * d0 + m21 * m21 * d1 + m22 * m22 * d2

    j00 = fx / safe_tz
    j02 = -(fx * tx) / (safe_tz * safe_tz)
    j11 = fy / safe_tz
    j12 = -(fy * ty) / (safe_tz * safe_tz)

    # conic -> cov2d via d(Sigma) = -K G K, K = conic matrix, G symmetric grad
    ka, kb, kc = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    ga = d_conic[:, 0]
    gb = 0.5 * d_conic[:, 1]
    gc = d_conic[:, 2]
    # P = K G (2x2), then D = -(P K)
    p00 = ka * ga + kb * gb
    p01 = ka * gb + kb * gc
    p10 = kb * ga + kc * gb
    p11 = kb * gb + kc * gc
    da = -(p00 * ka + p01 * kb)
    db_half = -(p00 * kb + p01 * kc)  # gradient on the (0,1) slot
    dc = -(p10 * kb + p11 * kc)
    db = 2.0 * db_half  # b is the single packed parameter for both slots

    # cov2d -> (v.., j..)
    dv00 = da * (j00 * j00)
    dv01 = db * (j00 * j11)
    dv02 = da * (2.0 * j00 * j02) + db * (j00 * j12)
    dv11 = dc * (j11 * j11)
    dv12 = dc * (2.0 * j11 * j12) + db * (j02 * j11)
    dv22 = da * (j02 * j02) + db * (j02 * j12) + dc * (j12 * j12)

    dj00 = da * (2.0 * j00 * v00 + 2.0 * j02 * v02) + db * (j11 * v01 + j12 * v02)
    dj02 = da * (2.0 * j00 * v02 + 2.0 * j02 * v22) + db * (j11 * v12 + j12 * v22)
    dj11 = dc * (2.0 * j11 * v11 + 2.0 * j12 * v12) + db * (j00 * v01 + j02 * v12)
    dj12 = dc * (2.0 * j11 * v12 + 2.0 * j12 * v22) + db * (j00 * v02 + j02 * v22)

    # v -> M and diag(s^2): GV symmetric with halved off-diagonals
    gv00, gv11, gv22 = dv00, dv11, dv22
    gv01, gv02, gv12 = 0.5 * dv01, 0.5 * dv02, 0.5 * dv12
    # dM = 2 GV M D
    dm00 = 2.0 * (gv00 * m00 + gv01 * m10 + gv02 * m20) * d0
    dm01 = 2.0 * (gv00 * m01 + gv01 * m11 + gv02 * m21) * d1
    dm02 = 2.0 * (gv00 * m02 + gv01 * m12 + gv02 * m22) * d2
    dm10 = 2.0 * (gv01 * m00 + gv11 * m10 + gv12 * m20) * d0
    dm11 = 2.0 * (gv01 * m01 + gv11 * m11 + gv12 * m21) * d1
    dm12 = 2.0 * (gv01 * m02 + gv11 * m12 + gv12 * m22) * d2
    dm20 = 2.0 * (gv02 * m00 + gv12 * m10 + gv22 * m20) * d0
    dm21 = 2.0 * (gv02 * m01 + gv12 * m11 + gv22 * m21) * d1
    dm22 = 2.0 * (gv02 * m02 + gv12 * m12 + gv22 * m22) * d2
    # d(s_k^2) = (M^T GV M)_kk
    dd0 = (m00 * (gv00 * m00 + gv01 * m10 + gv02 * m20)
           + m10 * (gv01 * m00 + gv11 * m10 + gv12 * m20)
           + m20 * (gv02 * m00 + gv12 * m10 + gv22 * m20))
    dd1 = (m01 * (gv00 * m01 + gv01 * m11 + gv02 * m21)
           + m11 * (gv01 * m01 + gv11 * m11 + gv12 * m21)
           + m21 * (gv02 * m01 + gv12 * m11 + gv22 * m21))
    dd2 = (m02 * (gv00 * m02 + gv01 * m12 + gv02 * m22)
           + m12 * (gv01 * m02 + gv11 * m12 + gv12 * m22)
           + m22 * (gv02 * m02 + gv12 * m12 + gv22 * m22))
    ds0 = 2.0 * s0 * dd0
    ds1 = 2.0 * s1 * dd1
    ds2 = 2.0 * s2 * dd2

    # dR = W^T dM
    dr00 = w[0, 0] * dm00 + w[1, 0] * dm10 + w[2, 0] * dm20
    dr01 = w[0, 0] * dm01 + w[1, 0] * dm11 + w[2, 0] * dm21
    dr02 = w[0, 0] * dm02 + w[1, 0] * dm12 + w[2, 0] * dm22
    dr10 = w[0, 1] * dm00 + w[1, 1] * dm10 + w[2, 1] * dm20
    dr11 = w[0, 1] * dm01 + w[1, 1] * dm11 + w[2, 1] * dm21
    dr12 = w[0, 1] * dm02 + w[1, 1] * dm12 + w[2, 1] * dm22
    dr20 = w[0, 2] * dm00 + w[1, 2] * dm10 + w[2, 2] * dm20
    dr21 = w[0, 2] * dm01 + w[1, 2] * dm11 + w[2, 2] * dm21
    dr22 = w[0, 2] * dm02 + w[1, 2] * dm12 + w[2, 2] * dm22

    dqw = (-2.0 * qz * dr01 + 2.0 * qy * dr02 + 2.0 * qz * dr10
           - 2.0 * qx * dr12 - 2.0 * qy * dr20 + 2.0 * qx * dr21)
    dqx = (2.0 * qy * dr01 + 2.0 * qz * dr02 + 2.0 * qy * dr10
           - 4.0 * qx * dr11 - 2.0 * qw * dr12 + 2.0 * qz * dr20
           + 2.0 * qw * dr21 - 4.0 * qx * dr22)
    dqy = (-4.0 * qy * dr00 + 2.0 * qx * dr01 + 2.0 * qw * dr02
           + 2.0 * qx * dr10 + 2.0 * qz * dr12 - 2.0 * qw * dr20
           + 2.0 * qz * dr21 - 4.0 * qy * dr22)
    dqz = (-4.0 * qz * dr00 - 2.0 * qw * dr01 + 2.0 * qx * dr02
           + 2.0 * qw * dr10 - 4.0 * qz * dr11 + 2.0 * qy * dr12
           + 2.0 * qx * dr20 + 2.0 * qy * dr21)

    # screen-space mean and Jacobian -> camera-frame position
    dmx = d_mu2d[:, 0]
    dmy = d_mu2d[:, 1]
    tz2 = safe_tz * safe_tz
    tz3 = tz2 * safe_tz
    dtx = dmx * (fx / safe_tz) + dj02 * (-fx / tz2)
    dty = dmy * (fy / safe_tz) + dj12 * (-fy / tz2)
    dtz = (dmx * (-(fx * tx) / tz2) + dmy * (-(fy * ty) / tz2)
           + dj00 * (-fx / tz2) + dj02 * (2.0 * fx * tx / tz3)
           + dj11 * (-fy / tz2) + dj12 * (2.0 * fy * ty / tz3))

    # t = W p + T  ->  dp = W^T dt
    dpx = w[0, 0] * dtx + w[1, 0] * dty + w[2, 0] * dtz
    dpy = w[0, 1] * dtx + w[1, 1] * dty + w[2, 1] * dtz
    dpz = w[0, 2] * dtx + w[1, 2] * dty + w[2, 2] * dtz

    vf = valid.astype(np.float64)
    d_pos[:, 0] = dpx * vf
    d_pos[:, 1] = dpy * vf
    d_pos[:, 2] = dpz * vf
    d_scale[:, 0] = ds0 * vf
    d_scale[:, 1] = ds1 * vf
    d_scale[:, 2] = ds2 * vf
    d_quat[:, 0] = dqw * vf
    d_quat[:, 1] = dqx * vf
    d_quat[:, 2] = dqy * vf
    d_quat[:, 3] = dqz * vf
    return d_pos, d_scale, d_quat
