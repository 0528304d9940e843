"""Finite-difference suite over every differentiable component.

Each check builds small random float64 instances and returns the worst
``gradient_check`` error; ``run_suite`` compares each against its threshold.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradient_check
from .geometry import look_at
from .model import GaussianLRM, ModelConfig, encode_views, stack_inputs
from .render import render_tensor
from .train import photometric_loss

OP_THRESHOLD = 1e-4
RENDER_THRESHOLD = 1e-3


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape))


# name -> (builder(rng) -> (f, leaves))
def _op_cases():
    def unary(fn, lo=-1.0, hi=1.0, shape=(2, 3)):
        def build(rng):
            a = _t(rng, *shape, lo=lo, hi=hi)
            w = rng.normal(size=shape)
            return (lambda: (fn(a) * w).sum()), [a]
        return build

    def binary(fn, shape_a=(2, 3), shape_b=(2, 3), lo_b=-1.0, hi_b=1.0):
        def build(rng):
            a = _t(rng, *shape_a)
            b = _t(rng, *shape_b, lo=lo_b, hi=hi_b)
            out_shape = np.broadcast_shapes(shape_a, shape_b)
            w = rng.normal(size=out_shape)
            return (lambda: (fn(a, b) * w).sum()), [a, b]
        return build

    def matmul(rng):
        a = _t(rng, 2, 3, 4)
        b = _t(rng, 2, 4, 2)
        c = _t(rng, 4, 3)
        w1, w2 = rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 3, 3))
        return (lambda: (ad.matmul(a, b) * w1).sum() + (ad.matmul(a, c) * w2).sum()), [a, b, c]

    def concat(rng):
        a, b = _t(rng, 2, 3), _t(rng, 2, 2)
        w = rng.normal(size=(2, 5))
        return (lambda: (ad.concat([a, b], axis=1) * w).sum()), [a, b]

    def slice_(rng):
        a = _t(rng, 4, 5)
        w = rng.normal(size=(2, 2))
        return (lambda: (a[1:3, ::2][:, :2] * w).sum()), [a]

    def reshape(rng):
        a = _t(rng, 2, 6)
        w = rng.normal(size=(3, 4))
        return (lambda: (a.reshape(3, 4) * w).sum()), [a]

    def transpose(rng):
        a = _t(rng, 2, 3, 4)
        w = rng.normal(size=(4, 2, 3))
        return (lambda: (a.transpose(2, 0, 1) * w).sum()), [a]

    def sum_axis(rng):
        a = _t(rng, 3, 4)
        w = rng.normal(size=(3, 1))
        return (lambda: (ad.sum_(a, axis=1, keepdims=True) * w).sum()), [a]

    def mean_axis(rng):
        a = _t(rng, 3, 4)
        w = rng.normal(size=(4,))
        return (lambda: (ad.mean(a, axis=0) * w).sum()), [a]

    return {
        "add": binary(ad.add, (2, 3), (3,)),
        "sub": binary(ad.sub, (2, 3), (2, 3)),
        "mul": binary(ad.mul, (2, 3), (3,)),
        "div": binary(ad.div, (2, 3), (2, 3), lo_b=0.5, hi_b=2.0),
        "power": unary(lambda a: ad.power(a, 3.0)),
        "matmul": matmul,
        "reshape": reshape,
        "transpose": transpose,
        "concat": concat,
        "slice": slice_,
        "sum": sum_axis,
        "mean": mean_axis,
        "exp": unary(ad.exp),
        "log": unary(ad.log, lo=0.5, hi=2.0),
        "sqrt": unary(ad.sqrt, lo=0.5, hi=2.0),
        "sigmoid": unary(ad.sigmoid, lo=-4, hi=4),
        "softmax": unary(ad.softmax, shape=(3, 5)),
        "layer_norm": unary(ad.layer_norm, shape=(3, 6)),
        "gelu": unary(ad.gelu, lo=-3, hi=3),
        "l2_normalize": unary(ad.l2_normalize, shape=(3, 4)),
    }


OP_CASES = _op_cases()


def check_op(name: str, n_instances: int = 100, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    for _ in range(n_instances):
        f, leaves = OP_CASES[name](rng)
        worst = max(worst, gradient_check(f, leaves))
    return worst


def random_render_case(rng, n: int = 5, size: int = 8):
    cam = look_at(rng.normal(0, 0.1, 3) + [0, 0, -3], [0, 0, 0], size, size, size, size)
    pos = Tensor(rng.uniform(-0.5, 0.5, (n, 3)))
    sc = Tensor(rng.uniform(0.1, 0.4, (n, 3)))
    q = rng.normal(size=(n, 4))
    rot = Tensor(q / np.linalg.norm(q, axis=1, keepdims=True))
    op = Tensor(rng.uniform(0.3, 0.9, n))
    col = Tensor(rng.uniform(0, 1, (n, 3)))
    return cam, [pos, sc, rot, op, col]


def check_render(n_scenes: int = 5, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_scenes):
        cam, leaves = random_render_case(rng)
        w = rng.normal(size=(cam.height, cam.width, 5))
        f = lambda: (render_tensor(*leaves, cam) * w).sum()  # noqa: E731
        worst = max(worst, gradient_check(f, leaves))
    return worst


def check_photometric_loss(n_instances: int = 3, seed: int = 0, size: int = 12) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        img = Tensor(rng.uniform(0, 1, (size, size, 3)))
        target = rng.uniform(0, 1, (size, size, 3))
        worst = max(worst, gradient_check(lambda: photometric_loss(img, target), [img]))
    return worst


def tiny_model_case(seed: int = 0, size: int = 8, blocks: int = 2):
    cfg = ModelConfig(patch_size=4, token_dim=8, num_blocks=blocks, num_heads=2, image_size=size,
                      init_std=0.3, head_init_std=0.3)
    model = GaussianLRM(cfg, seed=seed, mask_channel=True, dtype=np.float64)
    rng = np.random.default_rng(seed)
    cams = [look_at([np.sin(a) * 3, -1.0, -np.cos(a) * 3], [0, 0, 0], size, size, size, size)
            for a in np.linspace(-0.4, 0.4, 4)]
    images = rng.uniform(0, 1, (4, size, size, 3))
    fill = np.zeros((4, size, size), bool)
    fill[1, 2:5, 3:6] = True
    inputs = stack_inputs([encode_views(images, cams, fill_masks=fill, reference_index=0)])
    return model, inputs, cams


def check_model(seed: int = 0, n_params: int = 6, eps: float = 1e-6, gain: float = 1e4) -> float:
    """Forward + activate + render + loss, checked on a sample of entries of every weight.

    Weight gradients of the raw loss are around 1e-3, where the max(1, .)
    floor would make the error purely absolute; ``gain`` rescales the loss
    so the comparison is relative.
    """
    model, inputs, cams = tiny_model_case(seed)
    target = np.random.default_rng(seed + 1).uniform(0, 1, (cams[0].height, cams[0].width, 3))

    def f():
        g = model.predict(inputs)
        rgb = render_tensor(g.position[0], g.scale[0], g.rotation[0], g.opacity[0], g.color[0], cams[2])
        return photometric_loss(rgb[..., :3], target) * gain

    for p in model.params.values():
        p.zero_grad()
    f().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(model.params):
        leaf = model.params[name]
        analytic = leaf.grad.reshape(-1)
        flat = leaf.data.reshape(-1)
        # probe a few entries per weight so the check stays fast
        for i in rng.choice(flat.size, size=min(n_params, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(analytic[i] - num) / max(1.0, abs(analytic[i]), abs(num)))
    return worst


@dataclass
class CheckResult:
    component: str
    max_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.threshold


def run_suite(n_instances: int = 10, seed: int = 0) -> list[CheckResult]:
    results = [CheckResult(f"op:{name}", check_op(name, n_instances, seed), OP_THRESHOLD) for name in OP_CASES]
    results.append(CheckResult("photometric_loss", check_photometric_loss(seed=seed), OP_THRESHOLD))
    results.append(CheckResult("render", check_render(seed=seed), RENDER_THRESHOLD))
    results.append(CheckResult("model_end_to_end", check_model(seed=seed), RENDER_THRESHOLD))
    return results
