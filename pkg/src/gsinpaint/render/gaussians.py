from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Gaussians:
    """Struct-of-arrays set of 3D Gaussians.

    rotation holds unit quaternions in (w, x, y, z) order.
    """

    position: np.ndarray  # (n, 3)
    scale: np.ndarray  # (n, 3)
    rotation: np.ndarray  # (n, 4)
    opacity: np.ndarray  # (n,)
    color: np.ndarray  # (n, 3)
    instance_id: np.ndarray | None = None  # (n,) int, 0 = background

    def __post_init__(self):
        n = len(self.position)
        for name, width in (("position", 3), ("scale", 3), ("rotation", 4), ("color", 3)):
            arr = getattr(self, name)
            if arr.shape != (n, width):
                raise ValueError(f"{name} must have shape ({n}, {width}), got {arr.shape}")
        if self.opacity.shape != (n,):
            raise ValueError(f"opacity must have shape ({n},), got {self.opacity.shape}")
        if self.instance_id is not None and self.instance_id.shape != (n,):
            raise ValueError(f"instance_id must have shape ({n},), got {self.instance_id.shape}")

    def __len__(self):
        return len(self.position)

    @classmethod
    def empty(cls) -> "Gaussians":
        z = np.zeros((0, 3))
        return cls(z, z.copy(), np.zeros((0, 4)), np.zeros(0), z.copy(), np.zeros(0, dtype=np.int64))

    @classmethod
    def concatenate(cls, parts: list["Gaussians"]) -> "Gaussians":
        ids = None
        if all(p.instance_id is not None for p in parts):
            ids = np.concatenate([p.instance_id for p in parts])
        return cls(
            np.concatenate([p.position for p in parts]),
            np.concatenate([p.scale for p in parts]),
            np.concatenate([p.rotation for p in parts]),
            np.concatenate([p.opacity for p in parts]),
            np.concatenate([p.color for p in parts]),
            ids,
        )

    def subset(self, idx) -> "Gaussians":
        return Gaussians(
            self.position[idx],
            self.scale[idx],
            self.rotation[idx],
            self.opacity[idx],
            self.color[idx],
            None if self.instance_id is None else self.instance_id[idx],
        )

    def covariance(self) -> np.ndarray:
        A = quat_to_rotmat(self.rotation) * self.scale[:, None, :]
        return A @ np.swapaxes(A, 1, 2)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(n, 4) unit quaternions (w, x, y, z) -> (n, 3, 3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3), dtype=q.dtype)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Pull a gradient on quat_to_rotmat's output back onto the quaternion."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = gR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    gy = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    gz = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
        + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    return np.stack([gw, gx, gy, gz], axis=1)
