"""Pinhole cameras, Plücker ray maps, scene normalization and view selection.

Conventions: right-handed world, cameras look down +z, image y points down.
``R, t`` map world points into the camera frame (``x_cam = R @ x_world + t``).
Pixel ``(u, v)`` has its center at ``(u + 0.5, v + 0.5)``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(repr=False)
    t: np.ndarray = field(repr=False)
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("R must be a proper rotation (orthonormal, det +1)")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def optical_axis(self) -> np.ndarray:
        """World-frame unit vector the camera looks along."""
        return self.R[2].copy()

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "R": [float(v) for v in self.R.reshape(-1)],
            "t": [float(v) for v in self.t],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            R=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            t=np.asarray(d["t"], dtype=np.float64),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def look_at(center, target, fx, fy, width, height, down=(0.0, 1.0, 0.0)) -> Camera:
    """Camera at ``center`` looking at ``target`` with image-y aligned to ``down``."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    right = np.cross(np.asarray(down, dtype=np.float64), forward)
    right /= np.linalg.norm(right)
    img_down = np.cross(forward, right)
    R = np.stack([right, img_down, forward])
    return Camera(fx, fy, width / 2.0, height / 2.0, R, -R @ center, width, height)


def pixel_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Unit world-frame ray directions (H, W, 3) through pixel centers, and the origin."""
    u = np.arange(camera.width, dtype=np.float64) + 0.5
    v = np.arange(camera.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack(
        [(uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy, np.ones_like(uu)], axis=-1
    )
    d_world = d_cam @ camera.R  # row-vector form of R^T d
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    return d_world, camera.center


def plucker_rays(camera: Camera) -> np.ndarray:
    """Per-pixel Plücker coordinates, shape (H, W, 6): direction then moment ``o x d``."""
    d, o = pixel_rays(camera)
    m = np.cross(np.broadcast_to(o, d.shape), d)
    return np.concatenate([d, m], axis=-1)


def normalize_cameras(cameras: list[Camera]) -> tuple[list[Camera], float, np.ndarray]:
    """Re-center cameras on their mean center and scale into [-1, 1]^3.

    Returns the new cameras, the scale ``s`` and the mean center so that any
    world point maps as ``(x - mean) / s``.
    """
    if not cameras:
        raise ValueError("normalize_cameras needs at least one camera")
    centers = np.stack([c.center for c in cameras])
    mean = centers.mean(axis=0)
    dev = np.abs(centers - mean).max()
    scale = float(dev) if dev > 0 else 1.0
    out = []
    for cam, c in zip(cameras, centers):
        new_center = (c - mean) / scale
        out.append(replace(cam, t=-cam.R @ new_center))
    return out, scale, mean


def select_input_views(n_frames: int) -> list[int]:
    """Quartile frames of a clip, zero-based: floor((n - 1) * k / 3) for k = 0..3."""
    if n_frames < 5:
        raise ValueError(f"invalid clip: need at least 5 frames, got {n_frames}")
    return [((n_frames - 1) * k) // 3 for k in range(4)]


def _triangle_area(a, b, c) -> float:
    return 0.5 * float(np.linalg.norm(np.cross(b - a, c - a)))


def select_validation_views(cameras: list[Camera], exhaustive_limit: int = 30) -> tuple[int, list[int]]:
    """Reference = camera nearest the mean center; inputs = max-area triangle of the rest."""
    if len(cameras) < 4:
        raise ValueError(f"need at least 4 cameras, got {len(cameras)}")
    centers = np.stack([c.center for c in cameras])
    dist = np.linalg.norm(centers - centers.mean(axis=0), axis=1)
    ref = int(np.argmin(dist))  # argmin keeps the first of ties
    rest = [i for i in range(len(cameras)) if i != ref]

    if len(rest) <= exhaustive_limit:
        best, best_area = None, -1.0
        for tri in itertools.combinations(rest, 3):
            area = _triangle_area(*centers[list(tri)])
            if area > best_area:
                best, best_area = list(tri), area
        return ref, best

    # greedy farthest-point: farthest pair, then the point maximizing the area
    best_pair, best_d = None, -1.0
    for i, j in itertools.combinations(rest, 2):
        d = float(np.linalg.norm(centers[i] - centers[j]))
        if d > best_d:
            best_pair, best_d = (i, j), d
    i, j = best_pair
    k_best, best_area = None, -1.0
    for k in rest:
        if k in (i, j):
            continue
        area = _triangle_area(centers[i], centers[j], centers[k])
        if area > best_area:
            k_best, best_area = k, area
    return ref, sorted([i, j, k_best])
