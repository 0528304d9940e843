"""EWA projection of 3D Gaussians to screen space, and its exact gradient.

Each Gaussian is processed independently in a scalar loop, so its projection
does not depend on where it sits in the input list.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from ..geometry import Camera

Z_NEAR = 0.01
COV_DILATION = 0.3

_jit = dict(cache=True, fastmath=False, error_model="numpy")


@dataclass
class Projected:
    mean2d: np.ndarray  # (n, 2)
    cov2d: np.ndarray  # (n, 3): xx, xy, yy of the dilated screen covariance
    conic: np.ndarray  # (n, 3): a, b, c of its inverse
    depth: np.ndarray  # (n,) view-space z
    valid: np.ndarray  # (n,) bool, False = culled behind the near plane
    extent: np.ndarray  # (n, 2) 3-sigma half widths along x and y
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray

    @property
    def n_culled(self) -> int:
        return int((~self.valid).sum())


@nb.njit(**_jit)
def _rotmat(w, x, y, z, R):
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)


@nb.njit(**_jit)
def _geometry(i, position, scale, rotation, W, t, fx, fy, view, M, A, S):
    """Fill view coords, M = J W, A = Rq diag(s) and S = A A^T for Gaussian i."""
    for r in range(3):
        view[r] = W[r, 0] * position[i, 0] + W[r, 1] * position[i, 1] + W[r, 2] * position[i, 2] + t[r]
    x, y, z = view[0], view[1], view[2]
    j00 = fx / z
    j02 = -fx * x / (z * z)
    j11 = fy / z
    j12 = -fy * y / (z * z)
    for c in range(3):
        M[0, c] = j00 * W[0, c] + j02 * W[2, c]
        M[1, c] = j11 * W[1, c] + j12 * W[2, c]
    Rq = np.empty((3, 3))
    _rotmat(rotation[i, 0], rotation[i, 1], rotation[i, 2], rotation[i, 3], Rq)
    for r in range(3):
        for c in range(3):
            A[r, c] = Rq[r, c] * scale[i, c]
    for r in range(3):
        for c in range(3):
            S[r, c] = A[r, 0] * A[c, 0] + A[r, 1] * A[c, 1] + A[r, 2] * A[c, 2]


@nb.njit(**_jit)
def _project_kernel(position, scale, rotation, W, t, fx, fy, cx, cy):
    n = position.shape[0]
    mean2d = np.zeros((n, 2))
    cov2d = np.zeros((n, 3))
    conic = np.zeros((n, 3))
    depth = np.zeros(n)
    valid = np.zeros(n, dtype=np.bool_)
    extent = np.zeros((n, 2))
    view = np.empty(3)
    M = np.empty((2, 3))
    A = np.empty((3, 3))
    S = np.empty((3, 3))
    MS = np.empty((2, 3))
    for i in range(n):
        z = W[2, 0] * position[i, 0] + W[2, 1] * position[i, 1] + W[2, 2] * position[i, 2] + t[2]
        depth[i] = z
        if not z > Z_NEAR:
            continue
        valid[i] = True
        _geometry(i, position, scale, rotation, W, t, fx, fy, view, M, A, S)
        mean2d[i, 0] = fx * view[0] / view[2] + cx
        mean2d[i, 1] = fy * view[1] / view[2] + cy
        for r in range(2):
            for c in range(3):
                MS[r, c] = M[r, 0] * S[0, c] + M[r, 1] * S[1, c] + M[r, 2] * S[2, c]
        sxx = MS[0, 0] * M[0, 0] + MS[0, 1] * M[0, 1] + MS[0, 2] * M[0, 2] + COV_DILATION
        sxy = MS[0, 0] * M[1, 0] + MS[0, 1] * M[1, 1] + MS[0, 2] * M[1, 2]
        syy = MS[1, 0] * M[1, 0] + MS[1, 1] * M[1, 1] + MS[1, 2] * M[1, 2] + COV_DILATION
        cov2d[i, 0] = sxx
        cov2d[i, 1] = sxy
        cov2d[i, 2] = syy
        det = sxx * syy - sxy * sxy
        conic[i, 0] = syy / det
        conic[i, 1] = -sxy / det
        conic[i, 2] = sxx / det
        extent[i, 0] = 3.0 * np.sqrt(sxx)
        extent[i, 1] = 3.0 * np.sqrt(syy)
    return mean2d, cov2d, conic, depth, valid, extent


def project(position, scale, rotation, cam: Camera) -> Projected:
    """Screen-space mean, dilated covariance J W Σ Wᵀ Jᵀ + 0.3 I, and view depth."""
    position = np.ascontiguousarray(position, dtype=np.float64)
    scale = np.ascontiguousarray(scale, dtype=np.float64)
    rotation = np.ascontiguousarray(rotation, dtype=np.float64)
    out = _project_kernel(position, scale, rotation, cam.R, cam.t,
                          float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy))
    return Projected(*out, position=position, scale=scale, rotation=rotation)


@nb.njit(**_jit)
def _project_backward_kernel(position, scale, rotation, valid, conic, W, t, fx, fy,
                             g_mean2d, g_conic, g_depth):
    n = position.shape[0]
    g_pos = np.zeros((n, 3))
    g_scale = np.zeros((n, 3))
    g_rot = np.zeros((n, 4))
    view = np.empty(3)
    M = np.empty((2, 3))
    A = np.empty((3, 3))
    S = np.empty((3, 3))
    Rq = np.empty((3, 3))
    GM = np.empty((2, 3))
    GS = np.empty((3, 3))
    GA = np.empty((3, 3))
    GR = np.empty((3, 3))
    for i in range(n):
        if not valid[i]:
            continue
        _geometry(i, position, scale, rotation, W, t, fx, fy, view, M, A, S)
        x, y, z = view[0], view[1], view[2]
        a, b, c = conic[i, 0], conic[i, 1], conic[i, 2]
        # conic = cov^-1 with b on both off-diagonals: dL/dcov = -Q G_Q Q
        ga, gb, gc = g_conic[i, 0], 0.5 * g_conic[i, 1], g_conic[i, 2]
        q00 = a * ga + b * gb
        q01 = a * gb + b * gc
        q10 = b * ga + c * gb
        q11 = b * gb + c * gc
        G00 = -(q00 * a + q01 * b)
        G01 = -(q00 * b + q01 * c)
        G10 = -(q10 * a + q11 * b)
        G11 = -(q10 * b + q11 * c)
        Gs00 = 2.0 * G00
        Gs01 = G01 + G10
        Gs11 = 2.0 * G11
        # cov = M S M^T: dL/dM = (G + G^T) M S, dL/dS = M^T G M
        for col in range(3):
            ms0 = M[0, 0] * S[0, col] + M[0, 1] * S[1, col] + M[0, 2] * S[2, col]
            ms1 = M[1, 0] * S[0, col] + M[1, 1] * S[1, col] + M[1, 2] * S[2, col]
            GM[0, col] = Gs00 * ms0 + Gs01 * ms1
            GM[1, col] = Gs01 * ms0 + Gs11 * ms1
        for r in range(3):
            for col in range(3):
                GS[r, col] = (M[0, r] * (G00 * M[0, col] + G01 * M[1, col])
                              + M[1, r] * (G10 * M[0, col] + G11 * M[1, col]))
        # S = A A^T: dL/dA = (GS + GS^T) A
        for r in range(3):
            for col in range(3):
                acc = 0.0
                for k in range(3):
                    acc += (GS[r, k] + GS[k, r]) * A[k, col]
                GA[r, col] = acc
        _rotmat(rotation[i, 0], rotation[i, 1], rotation[i, 2], rotation[i, 3], Rq)
        for col in range(3):
            g_scale[i, col] = GA[0, col] * Rq[0, col] + GA[1, col] * Rq[1, col] + GA[2, col] * Rq[2, col]
            for r in range(3):
                GR[r, col] = GA[r, col] * scale[i, col]
        w_, qx, qy, qz = rotation[i, 0], rotation[i, 1], rotation[i, 2], rotation[i, 3]
        g_rot[i, 0] = 2 * (-qz * GR[0, 1] + qy * GR[0, 2] + qz * GR[1, 0] - qx * GR[1, 2]
                           - qy * GR[2, 0] + qx * GR[2, 1])
        g_rot[i, 1] = 2 * (qy * GR[0, 1] + qz * GR[0, 2] + qy * GR[1, 0] - 2 * qx * GR[1, 1]
                           - w_ * GR[1, 2] + qz * GR[2, 0] + w_ * GR[2, 1] - 2 * qx * GR[2, 2])
        g_rot[i, 2] = 2 * (-2 * qy * GR[0, 0] + qx * GR[0, 1] + w_ * GR[0, 2] + qx * GR[1, 0]
                           + qz * GR[1, 2] - w_ * GR[2, 0] + qz * GR[2, 1] - 2 * qy * GR[2, 2])
        g_rot[i, 3] = 2 * (-2 * qz * GR[0, 0] - w_ * GR[0, 1] + qx * GR[0, 2] + w_ * GR[1, 0]
                           - 2 * qz * GR[1, 1] + qy * GR[1, 2] + qx * GR[2, 0] + qy * GR[2, 1])
        # M = J W
        gj00 = GM[0, 0] * W[0, 0] + GM[0, 1] * W[0, 1] + GM[0, 2] * W[0, 2]
        gj02 = GM[0, 0] * W[2, 0] + GM[0, 1] * W[2, 1] + GM[0, 2] * W[2, 2]
        gj11 = GM[1, 0] * W[1, 0] + GM[1, 1] * W[1, 1] + GM[1, 2] * W[1, 2]
        gj12 = GM[1, 0] * W[2, 0] + GM[1, 1] * W[2, 1] + GM[1, 2] * W[2, 2]
        z2 = z * z
        z3 = z2 * z
        gu, gv = g_mean2d[i, 0], g_mean2d[i, 1]
        gx = gj02 * (-fx / z2) + gu * fx / z
        gy = gj12 * (-fy / z2) + gv * fy / z
        gz = (gj00 * (-fx / z2) + gj02 * (2 * fx * x / z3) + gj11 * (-fy / z2)
              + gj12 * (2 * fy * y / z3) - gu * fx * x / z2 - gv * fy * y / z2 + g_depth[i])
        for col in range(3):
            g_pos[i, col] = W[0, col] * gx + W[1, col] * gy + W[2, col] * gz
    return g_pos, g_scale, g_rot


def project_backward(proj: Projected, cam: Camera, g_mean2d, g_conic, g_depth):
    """Gradients (position, scale, rotation) from screen-space gradients."""
    return _project_backward_kernel(
        proj.position, proj.scale, proj.rotation, proj.valid, proj.conic, cam.R, cam.t,
        float(cam.fx), float(cam.fy),
        np.ascontiguousarray(g_mean2d, dtype=np.float64),
        np.ascontiguousarray(g_conic, dtype=np.float64),
        np.ascontiguousarray(g_depth, dtype=np.float64),
    )
