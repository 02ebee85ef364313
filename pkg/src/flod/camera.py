"""Pinhole camera: intrinsics plus a world-to-camera rigid transform.

Camera frame convention: x right, y down, z forward; a point is in front of
the camera when its camera-frame z exceeds the near plane. Pixel centers sit
at integer coordinates, so a Gaussian on the optical axis projects to
(cx, cy).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import quat_to_rotmat


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    near: float = 0.01
    cam_id: str = ""

    def __post_init__(self):
        self.rotation = np.ascontiguousarray(np.asarray(self.rotation, dtype=np.float64))
        self.translation = np.ascontiguousarray(np.asarray(self.translation, dtype=np.float64))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("rotation must be (3,3), translation (3,)")
        err = np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3)))
        if err > 1e-8:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.3g})")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_world_point(self, p_cam: np.ndarray) -> np.ndarray:
        return self.rotation.T @ (np.asarray(p_cam, dtype=np.float64) - self.translation)


def rotmat_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    q = q / np.sqrt(np.sum(q * q))
    if q[0] < 0:
        q = -q
    return q


def look_at(position, target, up=(0.0, 1.0, 0.0), *, fx: float, fy: float | None = None,
            width: int = 64, height: int = 64, cx: float | None = None,
            cy: float | None = None, near: float = 0.01, cam_id: str = "") -> Camera:
    """Camera at `position` with z-axis pointing at `target`."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - position
    zn = np.linalg.norm(z)
    if zn < 1e-12:
        raise ValueError("camera position coincides with target")
    z = z / zn
    x = np.cross(z, up)
    xn = np.linalg.norm(x)
    if xn < 1e-9:  # looking straight along up; pick any orthogonal axis
        alt = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        x = np.cross(z, alt)
        xn = np.linalg.norm(x)
    x = x / xn
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=0)
    return Camera(
        fx=fx, fy=fy if fy is not None else fx,
        cx=cx if cx is not None else width / 2.0,
        cy=cy if cy is not None else height / 2.0,
        width=width, height=height,
        rotation=rot, translation=-rot @ position,
        near=near, cam_id=cam_id,
    )


def camera_from_quat(rotation_wxyz, translation, *, fx, fy, cx, cy, width, height,
                     near: float = 0.01, cam_id: str = "") -> Camera:
    rot = quat_to_rotmat(np.asarray(rotation_wxyz, dtype=np.float64))
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                  rotation=rot, translation=np.asarray(translation, dtype=np.float64),
                  near=near, cam_id=cam_id)
