"""Approach-pose estimation from the visible surface of a fruit.

Angles are taken in the work frame: X toward the camera, Z up. ``theta`` is the azimuth
about Z, ``phi`` the elevation above the XY plane. The pose is the clamped mean of the
per-point angles about the estimated centre.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .errors import ConfigError, DegeneratePointError, PoseEstimationError
from .frame_ingest import ObjectCloud, Point3
from .sphere_hough import Sphere

logger = logging.getLogger(__name__)

DEGENERATE_DISTANCE = 1e-6
DEFAULT_CLAMP = math.pi / 3

# X_W = -Z_cam, Y_W = X_cam, Z_W = -Y_cam
CAMERA_TO_WORK = np.array([
    [0.0, 0.0, -1.0],
    [1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


@dataclass(frozen=True, eq=False)
class WorkFrame:
    rotation: np.ndarray = field(default_factory=lambda: CAMERA_TO_WORK.copy())

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ConfigError(f"work rotation must be 3x3, got shape {rot.shape}")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9) or not np.isclose(np.linalg.det(rot), 1.0):
            raise ConfigError("work rotation must be a proper rotation (orthonormal, det +1)")
        object.__setattr__(self, "rotation", rot)

    @classmethod
    def identity(cls) -> "WorkFrame":
        return cls(np.eye(3))

    def to_work(self, points: np.ndarray) -> np.ndarray:
        """Rotate camera-frame points (N×3 or a single 3-vector) into the work frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T

    def sphere_to_work(self, sphere: Sphere) -> Sphere:
        c = self.to_work(sphere.center)
        return Sphere(float(c[0]), float(c[1]), float(c[2]), sphere.r)


@dataclass(frozen=True, eq=False)
class FruitPose:
    theta: float
    phi: float
    R_pose: np.ndarray

    @property
    def approach_dir(self) -> np.ndarray:
        return approach_direction(self.theta, self.phi)


def point_angles(p: Point3 | np.ndarray, c: Point3 | np.ndarray) -> Tuple[float, float]:
    """Azimuth and elevation of ``p`` seen from ``c`` (both in the work frame)."""
    xc, yc, zc = np.asarray(p, dtype=np.float64) - np.asarray(c, dtype=np.float64)
    if math.sqrt(xc * xc + yc * yc + zc * zc) < DEGENERATE_DISTANCE:
        raise DegeneratePointError("point coincides with the sphere centre")
    return math.atan2(yc, xc), math.atan2(zc, math.hypot(xc, yc))


def angles_about(points: np.ndarray, c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`point_angles`; degenerate points are dropped."""
    pc = np.asarray(points, dtype=np.float64).reshape(-1, 3) - np.asarray(c, dtype=np.float64)
    pc = pc[np.linalg.norm(pc, axis=1) >= DEGENERATE_DISTANCE]
    theta = np.arctan2(pc[:, 1], pc[:, 0])
    phi = np.arctan2(pc[:, 2], np.hypot(pc[:, 0], pc[:, 1]))
    return theta, phi


def rotation_matrix(theta: float, phi: float) -> np.ndarray:
    """R_z(theta) · R_y(phi) · R_x(0)."""
    ct, st = math.cos(theta), math.sin(theta)
    cp, sp = math.cos(phi), math.sin(phi)
    return np.array([
        [ct * cp, -st, ct * sp],
        [st * cp, ct, st * sp],
        [-sp, 0.0, cp],
    ])


def approach_direction(theta: float, phi: float) -> np.ndarray:
    """Unit vector from the fruit centre toward its unblocked side."""
    return np.array([
        math.cos(theta) * math.cos(phi),
        math.sin(theta) * math.cos(phi),
        math.sin(phi),
    ])


def estimate_pose(points: ObjectCloud | np.ndarray, sphere: Sphere,
                  clamp: float = DEFAULT_CLAMP) -> FruitPose:
    """Mean per-point azimuth/elevation about ``sphere``'s centre, clamped to ±clamp.

    Points and sphere must already be expressed in the work frame.
    """
    pts = points.points if isinstance(points, ObjectCloud) else np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        raise PoseEstimationError("no visible points")
    theta_i, phi_i = angles_about(pts, sphere.center)
    if theta_i.size == 0:
        raise PoseEstimationError("every visible point coincides with the centre")
    theta_raw, phi_raw = float(np.mean(theta_i)), float(np.mean(phi_i))
    theta = min(max(theta_raw, -clamp), clamp)
    phi = min(max(phi_raw, -clamp), clamp)
    if (theta, phi) != (theta_raw, phi_raw):
        logger.warning("pose clamped from (%.1f°, %.1f°) to (%.1f°, %.1f°)",
                       math.degrees(theta_raw), math.degrees(phi_raw),
                       math.degrees(theta), math.degrees(phi))
    return FruitPose(theta, phi, rotation_matrix(theta, phi))


__all__ = [
    "WorkFrame",
    "FruitPose",
    "CAMERA_TO_WORK",
    "point_angles",
    "angles_about",
    "rotation_matrix",
    "approach_direction",
    "estimate_pose",
]
