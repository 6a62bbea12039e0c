"""Pinhole cameras, per-pixel rays and stratified depth sampling.

Pixel ``(px, py)`` covers ``[px, px+1) x [py, py+1)`` in continuous image
coordinates, so its centre sits at ``(px + 0.5, py + 0.5)``.  Cameras look down
their local ``-z`` axis with ``+y`` up; image rows grow downwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    focal: float
    cx: float
    cy: float
    rotation: np.ndarray  # camera-to-world, columns are camera axes
    translation: np.ndarray  # camera centre in world coordinates
    width: int
    height: int

    def __post_init__(self):
        if not self.focal > 0:
            raise CameraError(f"focal length must be positive, got {self.focal}")
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise CameraError("rotation must be orthonormal 3x3")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def look_at(cls, eye, target, up, focal, width, height, cx=None, cy=None) -> "CameraModel":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        R = np.stack([right, true_up, -forward], axis=1)
        return cls(
            focal=float(focal),
            cx=width / 2.0 if cx is None else float(cx),
            cy=height / 2.0 if cy is None else float(cy),
            rotation=R,
            translation=eye,
            width=int(width),
            height=int(height),
        )

    @property
    def extrinsics(self) -> np.ndarray:
        """3x4 camera-to-world matrix ``[R | t]``."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    @property
    def optical_axis(self) -> np.ndarray:
        return -self.rotation[:, 2]

    def scaled(self, factor: float) -> "CameraModel":
        """Same pose with the image resolution scaled by ``factor``."""
        return CameraModel(
            focal=self.focal * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            rotation=self.rotation,
            translation=self.translation,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to continuous pixel coordinates (..., 2)."""
        p = (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation
        depth = -p[..., 2]
        u = self.cx + self.focal * p[..., 0] / depth
        v = self.cy - self.focal * p[..., 1] / depth
        return np.stack([u, v], axis=-1)

    def directions(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Unit world directions through continuous pixel coordinates."""
        d_cam = np.stack(
            [(u - self.cx) / self.focal, -(v - self.cy) / self.focal, -np.ones_like(u, dtype=np.float64)],
            axis=-1,
        )
        d = d_cam @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def all_directions(self) -> np.ndarray:
        """(H*W, 3) directions through every pixel centre, row-major."""
        py, px = np.mgrid[0 : self.height, 0 : self.width]
        return self.directions(px.reshape(-1) + 0.5, py.reshape(-1) + 0.5)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if not 0.0 <= self.near < self.far:
            raise ValueError(f"need 0 <= near < far, got {self.near}, {self.far}")


@dataclass(frozen=True)
class SampleBatch:
    depths: np.ndarray  # (..., n)
    positions: np.ndarray  # (..., n, 3)


def pixel_ray(camera: CameraModel, px: int, py: int, near: float, far: float) -> Ray:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise IndexError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    d = camera.directions(np.array([px + 0.5]), np.array([py + 0.5]))[0]
    return Ray(origin=camera.translation.copy(), direction=d, near=near, far=far)


def stratified_depths(near: float, far: float, n_rays: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw per bin ``[near + i*step, near + (i+1)*step)``; shape (n_rays, n)."""
    if n < 1:
        raise ValueError("need at least one sample per ray")
    step = (far - near) / n
    lower = near + step * np.arange(n)
    t = lower + step * rng.random((n_rays, n))
    # a draw that rounds up onto the next bin edge is pulled back inside its bin
    return np.minimum(t, np.nextafter(lower + step, lower))


def stratified_sample(ray: Ray, n: int, rng: np.random.Generator) -> SampleBatch:
    t = stratified_depths(ray.near, ray.far, 1, n, rng)[0]
    return SampleBatch(depths=t, positions=ray.origin + t[:, None] * ray.direction)


def ray_rng(seed: int, *counters: int) -> np.random.Generator:
    """Independent stream keyed by ``(seed, *counters)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, counters)]))
