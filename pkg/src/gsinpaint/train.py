"""Two-stage training: plain reconstruction, then masked finetuning.

Stage 1 feeds four intact views and supervises renders of the predicted
Gaussians at held-out frames. Stage 2 adds the mask channel, grays out a
sampled region in the three inpaint views and keeps the same photometric
supervision, so the model learns to fill the hidden region from the
reference view.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Function, Tensor
from .geometry import select_input_views
from .masks import (
    MaskSet,
    close_mask,
    filter_object_masks,
    gen_geometric_masks,
    gen_random_masks,
    sample_mask_plan,
    sample_ref_ellipses,
    warp_mask,
)
from .metrics import psnr
from .model import MASK_MODES, N_VIEWS, GaussianLRM, ViewInputs, encode_views, stack_inputs
from .render import Gaussians, render_tensor
from .synth import SceneClip

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "loss", "mse", "feature", "psnr", "masked_psnr")
FILTER_BANK_SEED = 20240917


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 8e-5
    batch_size: int = 4
    steps: int = 1000
    n_supervision: int = 8
    mse_weight: float = 1.0
    feature_weight: float = 0.5
    seed: int = 0
    mask_encoding_mode: str = "inpaint_views"
    log_every: int = 50
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.n_supervision < 2:
            raise ValueError(f"n_supervision must be at least 2, got {self.n_supervision}")
        if self.mask_encoding_mode not in MASK_MODES:
            raise ValueError(f"mask_encoding_mode must be one of {MASK_MODES}")

    def supervision_count(self, n_frames: int) -> int:
        """M clipped to the frames left after the four inputs (never below 2)."""
        m = min(self.n_supervision, n_frames - N_VIEWS)
        if m < 2:
            raise ValueError(f"clip of {n_frames} frames leaves fewer than 2 supervision views")
        return m

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# -- sample construction ------------------------------------------------------

@dataclass
class TrainingSample:
    input_indices: list[int]
    reference_index: int  # position among the four inputs
    images: np.ndarray  # (4, H, W, 3) untouched input frames
    masks: MaskSet
    inputs: ViewInputs  # encoded, gray-filled views
    supervision_indices: list[int]
    supervision_images: np.ndarray  # (M, H, W, 3)
    supervision_regions: np.ndarray  # (M, H, W) bool, hidden region seen from each supervision view
    supervision_cameras: list = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


def object_tracks(clip: SceneClip, iou_threshold: float = 0.5) -> np.ndarray:
    """(n_objects, N) keep flags for every instance track of the clip."""
    if clip.n_objects == 0:
        return np.zeros((0, len(clip)), dtype=bool)
    return np.stack([filter_object_masks(clip.instance_masks[:, j], iou_threshold)
                     for j in range(clip.n_objects)])


def _object_masks(clip, idx, sup, ref, count, rng):
    keep = object_tracks(clip)
    usable = [j for j in range(clip.n_objects) if keep[j, idx].all()]
    if not usable:
        return None
    chosen = []
    union = np.zeros((N_VIEWS,) + clip.instance_masks.shape[2:], dtype=bool)
    for j in rng.permutation(usable)[:count]:
        trial = union | clip.instance_masks[idx, j]
        others = np.delete(trial, ref, axis=0)
        if others.mean(axis=(1, 2)).max() > 0.5:
            continue
        union = trial
        chosen.append(int(j))
    if not chosen:
        return None
    region = union[ref].copy()
    fill = union.copy()
    fill[ref] = False
    masks = MaskSet(fill, "object", ref, reference_region=region)
    sup_regions = clip.instance_masks[np.ix_(sup, chosen)].any(axis=1)
    return masks, sup_regions


def _warped_regions(region, clip, ref_frame, sup):
    cams = clip.cameras
    return np.stack([close_mask(warp_mask(region, clip.depth[ref_frame], cams[ref_frame], cams[s]))
                     for s in sup])


def build_training_sample(clip: SceneClip, rng: np.random.Generator, stage: int = 2,
                          n_supervision: int = 8, mode: str = "inpaint_views",
                          plan: tuple[str, int] | None = None) -> TrainingSample:
    """Pick inputs, reference, masks and supervision frames for one clip.

    ``plan`` overrides the sampled (mask_type, count); stage 1 uses no masks.
    """
    N = len(clip)
    idx = select_input_views(N)
    ref = int(rng.integers(0, N_VIEWS))
    leftovers = [k for k in range(N) if k not in idx]
    m = min(n_supervision, len(leftovers))
    if m < 2:
        raise ValueError(f"clip of {N} frames leaves fewer than 2 supervision views")
    sup = sorted(int(k) for k in rng.choice(leftovers, size=m, replace=False))
    images = clip.images
    size = images.shape[1]
    cams = [clip.cameras[k] for k in idx]
    notes = []

    if stage == 1:
        masks = MaskSet.empty(size, size, ref)
        sup_regions = np.zeros((m, size, size), dtype=bool)
    else:
        kind, count = plan if plan is not None else sample_mask_plan(rng)
        result = None
        if kind == "object":
            result = _object_masks(clip, idx, sup, ref, count, rng)
            if result is None:
                notes.append("no surviving instance track; fell back to geometric masks")
                log.info("clip %s: %s", clip.meta.get("seed"), notes[-1])
                kind = "geometric"
        if kind == "geometric":
            region = sample_ref_ellipses(rng, size, count)
            try:
                masks = gen_geometric_masks(region, clip.depth[idx[ref]], cams, ref)
                result = masks, _warped_regions(region, clip, idx[ref], sup)
            except ValueError as e:
                notes.append(f"geometric masks rejected ({e}); fell back to random masks")
                log.info("clip %s: %s", clip.meta.get("seed"), notes[-1])
                kind = "random"
        if kind == "random":
            masks = gen_random_masks(rng, size, count, ref)
            result = masks, _warped_regions(masks.reference_region, clip, idx[ref], sup)
        masks, sup_regions = result

    inputs = encode_views(images[idx], cams, fill_masks=masks.masks,
                          region_masks=_region_masks(masks), reference_index=ref, mode=mode)
    return TrainingSample(idx, ref, images[idx], masks, inputs, sup, images[sup], sup_regions,
                          [clip.cameras[k] for k in sup], notes)


def _region_masks(masks: MaskSet) -> np.ndarray:
    regions = masks.masks.copy()
    regions[masks.reference_index] = masks.reference_region
    return regions


# -- loss -----------------------------------------------------------------------

class FilterBank:
    """Frozen random two-level filter bank used as a stand-in perceptual feature.

    Level 1 correlates the RGB image with 8 random 5x5x3 filters; level 2
    average-pools those responses with stride 2 and correlates them with 8
    random 5x5x8 filters. Zero padding keeps every response map the size of
    its input. The bank is linear, so its adjoint is exact.
    """

    def __init__(self, seed: int = FILTER_BANK_SEED, n_filters: int = 8, ksize: int = 5, channels: int = 3):
        rng = np.random.default_rng(seed)
        self.ksize = ksize
        self.w1 = rng.normal(size=(ksize, ksize, channels, n_filters)) / math.sqrt(ksize * ksize * channels)
        self.w2 = rng.normal(size=(ksize, ksize, n_filters, n_filters)) / math.sqrt(ksize * ksize * n_filters)

    @staticmethod
    def _corr(x, w):
        k = w.shape[0]
        r = k // 2
        xp = np.pad(x, ((r, r), (r, r), (0, 0)))
        win = sliding_window_view(xp, (k, k), axis=(0, 1))  # (H, W, C, k, k)
        return np.einsum("hwcij,ijco->hwo", win, w, optimize=True)

    @classmethod
    def _corr_adjoint(cls, g, w):
        return cls._corr(g, w[::-1, ::-1].transpose(0, 1, 3, 2))

    @staticmethod
    def _pool(x):
        H, W, C = x.shape
        return x[: H // 2 * 2, : W // 2 * 2].reshape(H // 2, 2, W // 2, 2, C).mean(axis=(1, 3))

    @staticmethod
    def _pool_adjoint(g, shape):
        H, W, _ = shape
        out = np.zeros(shape)
        up = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
        out[: up.shape[0], : up.shape[1]] = up
        return out

    def features(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        f1 = self._corr(x, self.w1)
        f2 = self._corr(self._pool(f1), self.w2)
        return f1, f2

    def loss_and_grad(self, diff: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean squared response (averaged per level, summed over levels) and its gradient."""
        f1, f2 = self.features(diff)
        loss = float((f1 ** 2).mean() + (f2 ** 2).mean())
        g2 = 2.0 * f2 / f2.size
        g1 = 2.0 * f1 / f1.size + self._pool_adjoint(self._corr_adjoint(g2, self.w2), f1.shape)
        return loss, self._corr_adjoint(g1, self.w1)


_BANK: FilterBank | None = None


def filter_bank() -> FilterBank:
    global _BANK
    if _BANK is None:
        _BANK = FilterBank()
    return _BANK


class _FeatureLoss(Function):
    def __init__(self, bank: FilterBank):
        self.bank = bank

    def forward(self, diff):
        self.dtype = diff.dtype
        loss, self.grad = self.bank.loss_and_grad(diff.astype(np.float64))
        return np.asarray(loss, dtype=self.dtype)

    def backward(self, grad):
        return ((self.grad * float(grad)).astype(self.dtype),)


def feature_loss(render: Tensor, target: np.ndarray, bank: FilterBank | None = None) -> Tensor:
    diff = render - np.asarray(target, dtype=render.dtype)
    return _FeatureLoss(bank or filter_bank())(diff)


def photometric_loss(render: Tensor, target, feature_weight: float = 0.5, mse_weight: float = 1.0,
                     bank: FilterBank | None = None, return_terms: bool = False):
    """mse_weight * MSE + feature_weight * filter-bank feature MSE for one (H, W, 3) image."""
    render = ad.as_tensor(render)
    target = np.asarray(target)
    if render.shape != target.shape:
        raise ValueError(f"render shape {render.shape} does not match target shape {target.shape}")
    diff = render - target.astype(render.dtype)
    mse_term = (diff * diff).mean()
    feat_term = feature_loss(render, target, bank)
    loss = mse_term * mse_weight + feat_term * feature_weight
    if return_terms:
        return loss, mse_term, feat_term
    return loss


# -- optimizer ---------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


# -- training loop -----------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump_path: Path | None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class StepResult:
    loss: float
    mse: float
    feature: float
    psnr: float
    masked_psnr: float | None


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def sample_batch(cfg: TrainConfig, dataset: list[SceneClip], step: int) -> list[TrainingSample]:
    rng = step_rng(cfg.seed, step)
    out = []
    for _ in range(cfg.batch_size):
        clip = dataset[int(rng.integers(0, len(dataset)))]
        out.append(build_training_sample(clip, rng, cfg.stage, cfg.supervision_count(len(clip)),
                                         cfg.mask_encoding_mode))
    return out


def _split_metrics(pred: np.ndarray, target: np.ndarray, region: np.ndarray):
    outside = ~region
    p = psnr(pred, target, outside) if outside.any() else float("nan")
    mp = psnr(pred, target, region) if region.any() else float("nan")
    return p, mp


def render_supervision(model: GaussianLRM, g, b: int, cam) -> Tensor:
    """Differentiable (H, W, 5) render of sample ``b``'s Gaussians: rgb, depth, alpha."""
    return render_tensor(g.position[b], g.scale[b], g.rotation[b], g.opacity[b], g.color[b],
                         cam, far=model.cfg.far)


def forward_loss(model: GaussianLRM, cfg: TrainConfig, batch: list[TrainingSample]):
    """Mean photometric loss over every supervision view of the batch, plus metrics."""
    g = model.predict(stack_inputs([s.inputs for s in batch]))
    terms, mses, feats, ps, mps = [], [], [], [], []
    for b, s in enumerate(batch):
        for k, cam in enumerate(s.supervision_cameras):
            rgb = render_supervision(model, g, b, cam)[..., :3]
            loss, m, f = photometric_loss(rgb, s.supervision_images[k], cfg.feature_weight,
                                          cfg.mse_weight, return_terms=True)
            terms.append(loss)
            mses.append(m.item())
            feats.append(f.item())
            p, mp = _split_metrics(rgb.data, s.supervision_images[k], s.supervision_regions[k])
            ps.append(p)
            mps.append(mp)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    total = total * (1.0 / len(terms))
    masked = [v for v in mps if not math.isnan(v)]
    # the renderer culls Gaussians with non-finite positions, which would hide a divergence
    finite = all(np.isfinite(t.data).all() for t in g)
    metrics = StepResult(
        loss=total.item() if finite else float("nan"),
        mse=float(np.mean(mses)),
        feature=float(np.mean(feats)),
        psnr=float(np.nanmean(ps)),
        masked_psnr=float(np.mean(masked)) if masked else None,
    )
    return total, metrics


def prepare_model(cfg: TrainConfig, model) -> GaussianLRM:
    """Load a checkpoint path if needed and add the mask channel on stage-2 entry."""
    if not isinstance(model, GaussianLRM):
        model = GaussianLRM.load(model)
    if cfg.stage == 2 and not model.has_mask_channel:
        model.expand_patchifier_for_masks()
    if cfg.stage == 1 and model.has_mask_channel:
        raise ValueError("stage 1 expects a model without the mask channel")
    return model


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def train_stage(cfg: TrainConfig, model, dataset: list[SceneClip], out_dir=None,
                callback=None) -> tuple[GaussianLRM, list[dict]]:
    """Run ``cfg.steps`` optimizer steps; returns the trained model and per-step metrics.

    With ``out_dir`` set, writes config.json, metrics.csv (one averaged row
    every ``log_every`` steps), step_XXXXXX.gil checkpoints every
    ``checkpoint_every`` steps and final.gil. A non-finite loss aborts the run
    after dumping the parameters and RNG key of the offending step.
    """
    model = prepare_model(cfg, model)
    if not dataset:
        raise ValueError("empty dataset")
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2))
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
    opt = Adam(model.params, cfg.lr)
    history, window = [], []
    try:
        for step in range(cfg.steps):
            batch = sample_batch(cfg, dataset, step)
            opt.zero_grad()
            loss, metrics = forward_loss(model, cfg, batch)
            if not math.isfinite(metrics.loss):
                dump = _dump_divergence(cfg, model, step, out)
                raise TrainingDiverged(f"non-finite loss {metrics.loss} at step {step}", dump)
            loss.backward()
            opt.step()
            row = {"step": step, **asdict(metrics)}
            history.append(row)
            window.append(metrics)
            if callback is not None:
                callback(step, metrics)
            if writer is not None and ((step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps):
                writer.writerow(_window_row(step, window))
                fh.flush()
                window = []
            if out is not None and (step + 1) % cfg.checkpoint_every == 0:
                model.save(out / f"step_{step + 1:06d}.gil")
        if out is not None:
            model.save(out / "final.gil")
    finally:
        if writer is not None:
            fh.close()
    return model, history


def _window_row(step, window):
    mp = [m.masked_psnr for m in window if m.masked_psnr is not None]
    return [
        step,
        _fmt(float(np.mean([m.loss for m in window]))),
        _fmt(float(np.mean([m.mse for m in window]))),
        _fmt(float(np.mean([m.feature for m in window]))),
        _fmt(float(np.mean([m.psnr for m in window]))),
        _fmt(float(np.mean(mp)) if mp else None),
    ]


def _dump_divergence(cfg: TrainConfig, model: GaussianLRM, step: int, out: Path | None) -> Path | None:
    if out is None:
        log.error("non-finite loss at step %d (seed %d); no out_dir, nothing dumped", step, cfg.seed)
        return None
    ckpt = out / f"diverged_step_{step:06d}.gil"
    model.save(ckpt)
    dump = out / "divergence.json"
    dump.write_text(json.dumps({
        "step": step,
        "rng_key": [cfg.seed, step],
        "checkpoint": ckpt.name,
        "config": asdict(cfg),
    }, indent=2))
    log.error("non-finite loss at step %d; state dumped to %s", step, dump)
    return dump


def replay_step(dump_path, dataset: list[SceneClip]) -> StepResult:
    """Recompute the loss of a dumped step from its saved parameters and RNG key."""
    dump_path = Path(dump_path)
    info = json.loads(dump_path.read_text())
    cfg = TrainConfig.from_dict(info["config"])
    model = GaussianLRM.load(dump_path.parent / info["checkpoint"])
    batch = sample_batch(cfg, dataset, int(info["step"]))
    with ad.no_grad():
        _, metrics = forward_loss(model, cfg, batch)
    return metrics


# -- inference -----------------------------------------------------------------------

def infer_inpaint(model: GaussianLRM, images, cameras, masks: MaskSet, ref_image) -> tuple[Gaussians, dict]:
    """One forward pass; the reference view's pixels are replaced by ``ref_image``.

    Returns the merged 4*H*W Gaussians and wall-clock seconds for the
    tokenize / transformer / decode phases plus their total.
    """
    images = np.array(images, dtype=np.float64)
    if images.shape[0] != N_VIEWS or len(cameras) != N_VIEWS:
        raise ValueError(f"expected {N_VIEWS} images and cameras")
    if masks.masks.shape[1:] != images.shape[1:3]:
        raise ValueError(f"masks of size {masks.masks.shape[1:]} do not align with views of size {images.shape[1:3]}")
    ref = masks.reference_index
    ref_image = np.asarray(ref_image, dtype=np.float64)
    if ref_image.shape != images.shape[1:]:
        raise ValueError(f"reference image shape {ref_image.shape} does not match views {images.shape[1:]}")
    images[ref] = ref_image
    inputs = stack_inputs([encode_views(images, cameras, fill_masks=masks.masks,
                                        region_masks=_region_masks(masks), reference_index=ref,
                                        mode=model.cfg.mask_encoding_mode)])
    if not model.has_mask_channel:
        inputs = inputs._replace(mask_channel=np.zeros_like(inputs.mask_channel))
    with ad.no_grad():
        t0 = time.perf_counter()
        tokens = model.tokenize(inputs)
        t1 = time.perf_counter()
        tokens = model.transformer(tokens)
        t2 = time.perf_counter()
        g = model.predict_from_tokens(tokens, inputs)
        t3 = time.perf_counter()
    timing = {"tokenize": t1 - t0, "transformer": t2 - t1, "decode": t3 - t2, "total": t3 - t0}
    gauss = Gaussians(
        g.position.data[0].astype(np.float64),
        g.scale.data[0].astype(np.float64),
        g.rotation.data[0].astype(np.float64),
        g.opacity.data[0, :, 0].astype(np.float64),
        g.color.data[0].astype(np.float64),
    )
    return gauss, timing
