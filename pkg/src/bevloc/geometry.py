"""Planar rigid-body poses and point-cloud transforms."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    arr = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"cannot wrap non-finite angle {theta!r}")
    out = np.pi - np.mod(np.pi - arr, 2 * np.pi)
    if np.ndim(out) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Pose2:
    """Planar pose (x, y, yaw); yaw is CCW-positive about +z."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("x", "y"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"Pose2.{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @classmethod
    def identity(cls) -> Pose2:
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, arr) -> Pose2:
        x, y, yaw = np.asarray(arr, dtype=float).reshape(3)
        return cls(x, y, yaw)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose2:
        return cls(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])

    def as_matrix(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def __matmul__(self, other: Pose2) -> Pose2:
        return compose(self, other)


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Return ``a (+) b``: apply ``b`` in the frame of ``a``."""
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.yaw + b.yaw)


def inverse(p: Pose2) -> Pose2:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return Pose2(-c * p.x - s * p.y, s * p.x - c * p.y, -p.yaw)


def as_cloud(points) -> np.ndarray:
    """Validate and return an ``(N, 3)`` float64 point array."""
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.size == 0:
        return np.zeros((0, 3))
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise ValueError(f"point cloud must have shape (N, 3), got {cloud.shape}")
    if not np.all(np.isfinite(cloud)):
        raise ValueError("point cloud contains non-finite coordinates")
    return cloud


def transform_cloud(p: Pose2, cloud) -> np.ndarray:
    """Rotate points by ``p.yaw`` about z, then translate by ``(p.x, p.y)``."""
    cloud = as_cloud(cloud)
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    out = cloud.copy()
    out[:, 0] = c * cloud[:, 0] - s * cloud[:, 1] + p.x
    out[:, 1] = s * cloud[:, 0] + c * cloud[:, 1] + p.y
    return out


def relative(frame: Pose2, p: Pose2) -> Pose2:
    """Express world pose ``p`` in the local frame of ``frame``."""
    return compose(inverse(frame), p)
