"""Pinhole cameras (OpenCV convention: +x right, +y down, +z forward)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    fov_x: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # world -> camera
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.width, self.height = int(self.width), int(self.height)
        self.validate()

    def validate(self, tol: float = 1e-8):
        if not 0 < self.fov_x < math.pi:
            raise CameraError(f"fov_x={self.fov_x} outside (0, pi)")
        if self.width < 1 or self.height < 1:
            raise CameraError("image dimensions must be >= 1")
        if not 0 < self.near < self.far:
            raise CameraError("need 0 < near < far")
        R = self.rotation
        if R.shape != (3, 3) or self.translation.shape != (3,):
            raise CameraError("rotation must be 3x3 and translation a 3-vector")
        if np.abs(R @ R.T - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1) > tol:
            raise CameraError("rotation is not a proper orthonormal matrix")

    @property
    def focal(self) -> float:
        return self.width / (2.0 * math.tan(self.fov_x / 2.0))

    @property
    def fx(self) -> float:
        return self.focal

    @property
    def fy(self) -> float:
        return self.focal

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points) -> np.ndarray:
        return np.asarray(points, float) @ self.rotation.T + self.translation

    def translated(self, offset) -> "Camera":
        """Same camera moved by ``offset`` in world space."""
        offset = np.asarray(offset, float)
        return Camera(self.fov_x, self.width, self.height, self.rotation.copy(),
                      self.translation - self.rotation @ offset, self.near, self.far)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), *, fov_x: float,
            width: int, height: int, near: float = 0.01, far: float = 100.0) -> Camera:
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    forward = target - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Camera(fov_x, width, height, R, -R @ eye, near, far)


def orbit_cameras(n: int, radius: float, *, fov_x: float, width: int, height: int,
                  elevation_range=(-0.5, 0.9), seed: int = 0) -> list[Camera]:
    """``n`` cameras on a sphere of ``radius`` looking at the origin.

    Azimuths follow the golden angle; elevations are stratified in
    ``elevation_range`` (radians) with a seeded jitter.
    """
    rng = np.random.default_rng(seed)
    lo, hi = elevation_range
    cams = []
    for i in range(n):
        az = i * math.pi * (3.0 - math.sqrt(5.0)) + rng.uniform(0, 0.1)
        el = lo + (hi - lo) * (i + rng.uniform(0.25, 0.75)) / n
        eye = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(look_at(eye, fov_x=fov_x, width=width, height=height))
    return cams
