"""Pinhole camera model shared by the dataset loaders and the splatting renderer.

Conventions follow COLMAP: ``rotation``/``translation`` map world points into the
camera frame (x right, y down, z forward) and pixel centres sit on integer
coordinates, so pixel ``(row i, col j)`` is at ``(u, v) = (j, i)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation


def qvec_to_rotmat(qvec) -> np.ndarray:
    """Rotation matrix of a unit quaternion given as ``(qw, qx, qy, qz)``."""
    w, x, y, z = (float(q) for q in qvec)
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * z * x + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * z * x - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def rotmat_to_qvec(rot) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(np.asarray(rot, dtype=np.float64)).as_quat()
    q = np.array([w, x, y, z])
    # canonical sign: non-negative scalar part
    return -q if q[0] < 0 else q


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.2e})")

    @classmethod
    def from_qvec(cls, qvec, tvec, fx, fy, cx, cy, width, height) -> "Camera":
        return cls(fx, fy, cx, cy, qvec_to_rotmat(qvec), np.asarray(tvec), width, height)

    @property
    def qvec(self) -> np.ndarray:
        return rotmat_to_qvec(self.rotation)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def scaled(self, factor: float) -> "Camera":
        """Same pose at a resolution scaled by ``factor`` (pixel centres stay aligned)."""
        return Camera(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                      self.rotation.copy(), self.translation.copy(),
                      int(round(self.width * factor)), int(round(self.height * factor)))

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "qvec": [float(q) for q in self.qvec],
            "tvec": [float(t) for t in self.translation],
            "width": int(self.width), "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict, width: int | None = None, height: int | None = None) -> "Camera":
        w = d.get("width", width)
        h = d.get("height", height)
        if w is None or h is None:
            raise ValueError("camera record lacks width/height")
        return cls.from_qvec(d["qvec"], d["tvec"], d["fx"], d["fy"], d["cx"], d["cy"], int(w), int(h))


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera ``(R, t)`` for a camera at ``eye`` looking at ``target``.

    ``up`` is the world direction that should appear towards the top of the image;
    with y-down image coordinates the default treats world -y as up.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        raise ValueError("degenerate camera placement: eye coincides with target")
    forward /= norm
    down = -np.asarray(up, dtype=np.float64)
    right = np.cross(down, forward)
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("degenerate camera placement: view direction parallel to up")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return rot, -rot @ eye
