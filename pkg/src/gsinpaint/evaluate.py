"""Inpainting benchmark over held-out synthetic scenes.

For each scene the reference view and a wide input triangle are chosen from
the camera layout, a target instance (or a depth-warped ellipse region when
no instance survives filtering) is grayed out in the three inpaint views, the
intact ground-truth reference frame is fed in, and every remaining frame is
rendered and scored inside and outside the hidden region.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import select_validation_views
from .masks import MaskSet, close_mask, sample_ref_ellipses, warp_mask
from .metrics import psnr, ssim
from .model import GaussianLRM
from .render import render
from .synth import SceneClip
from .train import infer_inpaint, object_tracks

PROTOCOLS = ("gt_reference", "reconstruction")
METRICS = ("psnr", "m_psnr", "ssim", "m_ssim")


@dataclass
class EvalReport:
    protocol: str
    per_scene: list[dict]
    aggregate: dict
    timing: dict
    fingerprint: str
    config: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("timing")
            for row in d["per_scene"]:
                row.pop("seconds", None)
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))

    def table(self) -> str:
        cols = ["scene", "mask", *METRICS]
        lines = [" ".join(f"{c:>10}" for c in cols)]

        def cell(v):
            if v is None:
                return f"{'-':>10}"
            if isinstance(v, float):
                return f"{v:>10.4f}"
            return f"{str(v):>10}"

        for row in self.per_scene:
            lines.append(" ".join(cell(row.get(c)) for c in cols))
        lines.append(" ".join(cell(v) for v in ["mean", "", *(self.aggregate.get(m) for m in METRICS)]))
        t = self.timing
        if t:
            lines.append(f"inference seconds: mean {t['mean']:.4f}  min {t['min']:.4f}  max {t['max']:.4f}")
        return "\n".join(lines)


def aggregate(per_scene: list[dict]) -> dict:
    """Mean of each metric over the scenes that report it; absent if none do."""
    out = {}
    for m in METRICS:
        vals = [r[m] for r in per_scene if r.get(m) is not None]
        if vals:
            out[m] = float(np.mean(vals))
    return out


def fingerprint(model: GaussianLRM, protocol: str) -> str:
    h = hashlib.sha256()
    h.update(model.cfg.to_json().encode())
    h.update(protocol.encode())
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return h.hexdigest()[:16]


def scene_masks(clip: SceneClip, inputs: list[int], ref: int, holdout: list[int], seed: int):
    """Fill masks for the inputs plus the hidden region in each held-out frame.

    Uses the largest instance whose track survives filtering at every input
    frame; otherwise warps two reference ellipses through the stored depth.
    """
    keep = object_tracks(clip)
    usable = [j for j in range(clip.n_objects) if keep[j, inputs].all()]
    if usable:
        j = max(usable, key=lambda k: (clip.instance_masks[inputs, k].sum(), -k))
        fill = clip.instance_masks[inputs, j].copy()
        region = fill[ref].copy()
        fill[ref] = False
        held = clip.instance_masks[holdout, j]
        return MaskSet(fill, "object", ref, reference_region=region), held
    size = clip.images.shape[1]
    region = sample_ref_ellipses(np.random.default_rng(seed), size, 2)
    cams = clip.cameras
    src = inputs[ref]
    warped = [close_mask(warp_mask(region, clip.depth[src], cams[src], cams[k])) for k in inputs]
    warped[ref] = np.zeros_like(region)
    held = np.stack([close_mask(warp_mask(region, clip.depth[src], cams[src], cams[k])) for k in holdout])
    return MaskSet(np.stack(warped), "geometric", ref, reference_region=region), held


def _mean_or_none(vals):
    return float(np.mean(vals)) if vals else None


def evaluate_scene(model: GaussianLRM, clip: SceneClip, protocol: str, seed: int = 0) -> dict:
    cams = clip.cameras
    ref_frame, tri = select_validation_views(cams)
    inputs = sorted([ref_frame, *tri])
    ref = inputs.index(ref_frame)
    holdout = [k for k in range(len(clip)) if k not in inputs]
    images = clip.images
    size = images.shape[1]
    if protocol == "reconstruction":
        masks = MaskSet.empty(size, size, ref)
        held = np.zeros((len(holdout), size, size), dtype=bool)
    else:
        masks, held = scene_masks(clip, inputs, ref, holdout, seed)
    g, timing = infer_inpaint(model, images[inputs], [cams[k] for k in inputs], masks, images[ref_frame])
    ps, ss, mps, mss = [], [], [], []
    for k, frame in enumerate(holdout):
        pred = np.clip(render(g, cams[frame], far=model.cfg.far).rgb, 0.0, 1.0)
        gt = images[frame]
        ps.append(psnr(pred, gt))
        ss.append(ssim(pred, gt))
        if held[k].any():
            mps.append(psnr(pred, gt, held[k]))
            mss.append(ssim(pred, gt, held[k]))
    return {
        "scene": clip.meta.get("seed", None),
        "mask": masks.mask_type if protocol != "reconstruction" else "none",
        "psnr": float(np.mean(ps)),
        "m_psnr": _mean_or_none(mps),
        "ssim": float(np.mean(ss)),
        "m_ssim": _mean_or_none(mss),
        "n_holdout": len(holdout),
        "seconds": timing["total"],
    }


def run_benchmark(model, scenes: list[SceneClip], protocol: str = "gt_reference", seed: int = 0) -> EvalReport:
    """Evaluate a model (or checkpoint path) on every scene under ``protocol``."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    if not isinstance(model, GaussianLRM):
        path = Path(model)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} not found")
        model = GaussianLRM.load(path)
    rows = []
    for i, clip in enumerate(scenes):
        row = evaluate_scene(model, clip, protocol, seed=seed + i)
        if row["scene"] is None:
            row["scene"] = i
        rows.append({k: v for k, v in row.items() if v is not None})
    secs = [r["seconds"] for r in rows]
    timing = {"mean": float(np.mean(secs)), "min": float(np.min(secs)), "max": float(np.max(secs))} if secs else {}
    return EvalReport(protocol, rows, aggregate(rows), timing, fingerprint(model, protocol),
                      config=json.loads(model.cfg.to_json()))


def paired_wins(a: EvalReport, b: EvalReport, metric: str = "m_psnr") -> tuple[int, int]:
    """(scenes where ``a`` strictly beats ``b`` on ``metric``, scenes compared)."""
    wins = n = 0
    for ra, rb in zip(a.per_scene, b.per_scene):
        if ra["scene"] != rb["scene"]:
            raise ValueError(f"reports cover different scenes: {ra['scene']} vs {rb['scene']}")
        va, vb = ra.get(metric), rb.get(metric)
        if va is None or vb is None or math.isnan(va) or math.isnan(vb):
            continue
        n += 1
        wins += va > vb
    return wins, n
