"""Differentiable 3D Gaussian splatting on the CPU."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Function, Tensor
from ..geometry import Camera
from . import raster
from .gaussians import Gaussians, quat_to_rotmat
from .projection import Projected, project, project_backward

DEFAULT_FAR = 4.0
DEPTH_ALPHA_EPS = 1e-6

__all__ = [
    "DEFAULT_FAR",
    "Gaussians",
    "RenderOutput",
    "render",
    "render_backward",
    "render_tensor",
    "project",
    "quat_to_rotmat",
]


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    alpha: np.ndarray  # (H, W)
    instance: np.ndarray | None  # (H, W) int, 0 = no instance
    n_culled: int
    ctx: "_RenderContext | None" = None


@dataclass
class _RenderContext:
    cam: Camera
    proj: Projected
    opacity: np.ndarray
    feat: np.ndarray
    offsets: np.ndarray
    lists: np.ndarray
    composite: np.ndarray
    alpha: np.ndarray
    far: float


def _prepare(position, scale, rotation, opacity, color, cam):
    proj = project(position, scale, rotation, cam)
    visible = np.flatnonzero(proj.valid)
    order = visible[np.argsort(proj.depth[visible], kind="stable")].astype(np.int64)
    feat = np.concatenate(
        [np.asarray(color, dtype=np.float64), proj.depth[:, None]], axis=1
    )
    return proj, order, feat


def render(
    g: Gaussians,
    cam: Camera,
    far: float = DEFAULT_FAR,
    tiled: bool = True,
    keep_context: bool = False,
) -> RenderOutput:
    """Depth-sort, splat and alpha-composite ``g`` as seen by ``cam``.

    ``tiled=False`` runs the naive full-list renderer used as an oracle.
    """
    H, W = cam.height, cam.width
    if len(g) == 0:
        return RenderOutput(
            np.zeros((H, W, 3)), np.full((H, W), float(far)), np.zeros((H, W)),
            np.zeros((H, W), dtype=np.int64), 0,
        )
    opacity = np.asarray(g.opacity, dtype=np.float64)
    proj, order, feat = _prepare(g.position, g.scale, g.rotation, opacity, g.color, cam)
    offsets, lists = raster.build_tile_lists(order, proj.mean2d, proj.extent, W, H, raster.TILE)
    if tiled:
        comp, trans, argmax = raster.composite_tiled(
            offsets, lists, proj.mean2d, proj.conic, opacity, feat, W, H, raster.TILE
        )
    else:
        comp, trans, argmax = raster.composite_naive(order, proj.mean2d, proj.conic, opacity, feat, W, H)
    alpha = 1.0 - trans
    depth = np.full((H, W), float(far))
    hit = alpha > DEPTH_ALPHA_EPS
    depth[hit] = comp[..., 3][hit] / alpha[hit]
    instance = None
    if g.instance_id is not None:
        ids = np.concatenate([np.asarray(g.instance_id, dtype=np.int64), [0]])
        instance = ids[argmax]  # argmax -1 picks the trailing 0
    ctx = None
    if keep_context:
        ctx = _RenderContext(cam, proj, opacity, feat, offsets, lists, comp, alpha, float(far))
    return RenderOutput(comp[..., :3].copy(), depth, alpha, instance, proj.n_culled, ctx)


def render_backward(out: RenderOutput, g_rgb=None, g_depth=None, g_alpha=None) -> dict:
    """Gradients of a loss w.r.t. every Gaussian parameter, given output gradients.

    ``out`` must come from ``render(..., keep_context=True)``.
    """
    ctx = out.ctx
    if ctx is None:
        raise ValueError("render_backward needs a RenderOutput rendered with keep_context=True")
    H, W = ctx.cam.height, ctx.cam.width
    g_comp = np.zeros((H, W, 4))
    g_a = np.zeros((H, W)) if g_alpha is None else np.array(g_alpha, dtype=np.float64)
    if g_rgb is not None:
        g_comp[..., :3] = g_rgb
    if g_depth is not None:
        g_depth = np.asarray(g_depth, dtype=np.float64)
        hit = ctx.alpha > DEPTH_ALPHA_EPS
        safe = np.where(hit, ctx.alpha, 1.0)
        g_comp[..., 3] = np.where(hit, g_depth / safe, 0.0)
        g_a = g_a - np.where(hit, g_depth * ctx.composite[..., 3] / (safe * safe), 0.0)
    g_mean, g_conic, g_op, g_feat = raster.composite_backward(
        ctx.offsets, ctx.lists, ctx.proj.mean2d, ctx.proj.conic, ctx.opacity, ctx.feat,
        W, H, raster.TILE, g_comp, g_a,
    )
    g_pos, g_scale, g_rot = project_backward(ctx.proj, ctx.cam, g_mean, g_conic, g_feat[:, 3])
    return {
        "position": g_pos,
        "scale": g_scale,
        "rotation": g_rot,
        "opacity": g_op,
        "color": g_feat[:, :3],
    }


class _RenderFunction(Function):
    def __init__(self, cam: Camera, far: float):
        self.cam = cam
        self.far = far

    def forward(self, position, scale, rotation, opacity, color):
        self.dtype = position.dtype
        g = Gaussians(
            position.astype(np.float64), scale.astype(np.float64), rotation.astype(np.float64),
            opacity.astype(np.float64).reshape(-1), color.astype(np.float64),
        )
        self.opacity_shape = opacity.shape
        self.out = render(g, self.cam, far=self.far, keep_context=True)
        stacked = np.concatenate(
            [self.out.rgb, self.out.depth[..., None], self.out.alpha[..., None]], axis=-1
        )
        return stacked.astype(self.dtype)

    def backward(self, grad):
        grad = grad.astype(np.float64)
        gr = render_backward(self.out, grad[..., :3], grad[..., 3], grad[..., 4])
        self.out = None  # free the context
        cast = lambda a: a.astype(self.dtype)
        return (
            cast(gr["position"]),
            cast(gr["scale"]),
            cast(gr["rotation"]),
            cast(gr["opacity"].reshape(self.opacity_shape)),
            cast(gr["color"]),
        )


def render_tensor(position: Tensor, scale: Tensor, rotation: Tensor, opacity: Tensor,
                  color: Tensor, cam: Camera, far: float = DEFAULT_FAR) -> Tensor:
    """Differentiable render; returns an (H, W, 5) tensor: rgb, depth, alpha."""
    return _RenderFunction(cam, far)(position, scale, rotation, opacity, color)
