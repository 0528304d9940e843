"""Procedural multi-view clips built from Gaussians and rendered by our splatter.

A scene is a textured floor sheet plus a few compact object clusters; the
camera orbits the scene on a jittered arc. Images, depth and instance maps
all come from ``render`` so the data carries no label noise.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera, look_at, normalize_cameras
from .render import DEFAULT_FAR, Gaussians, render
from .render.io import read_depth, read_mask_png, read_png, write_depth, write_mask_png, write_png

log = logging.getLogger(__name__)

BACKGROUND_STYLES = ("waves", "checker", "noise")


@dataclass
class SceneConfig:
    n_frames: int = 15
    image_size: int = 64
    n_objects: int = 3
    background_style: str = "waves"
    orbit_radius: float = 3.0
    elevation_deg: float = 35.0
    arc_deg: float = 100.0
    focal_scale: float = 1.0  # focal length in units of image size

    def validate(self):
        if self.n_frames < 5:
            raise ValueError(f"n_frames must be >= 5, got {self.n_frames}")
        if not 0 <= self.n_objects <= 8:
            raise ValueError(f"n_objects must be in [0, 8], got {self.n_objects}")
        if self.image_size < 8:
            raise ValueError(f"image_size too small: {self.image_size}")
        if self.background_style not in BACKGROUND_STYLES:
            raise ValueError(f"background_style must be one of {BACKGROUND_STYLES}")


@dataclass
class SceneFrame:
    camera: Camera
    image: np.ndarray  # (H, W, 3) in [0, 1]
    frame_index: int


@dataclass
class SceneClip:
    frames: list[SceneFrame]
    gt_gaussians: Gaussians | None
    instance_masks: np.ndarray  # (N, n_objects, H, W) bool
    depth: np.ndarray  # (N, H, W) float32
    scale: float = 1.0
    mean_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    far: float = DEFAULT_FAR
    meta: dict = field(default_factory=dict)

    @property
    def cameras(self) -> list[Camera]:
        return [f.camera for f in self.frames]

    @property
    def images(self) -> np.ndarray:
        return np.stack([f.image for f in self.frames])

    @property
    def n_objects(self) -> int:
        return self.instance_masks.shape[1]

    def __len__(self):
        return len(self.frames)


# -- scene content -----------------------------------------------------------

def _floor_color(style: str, xz: np.ndarray, rng) -> np.ndarray:
    base = rng.uniform(0.2, 0.8, size=3)
    if style == "checker":
        cell = rng.uniform(0.35, 0.6)
        other = rng.uniform(0.1, 0.9, size=3)
        k = (np.floor(xz[:, 0] / cell) + np.floor(xz[:, 1] / cell)) % 2
        col = np.where(k[:, None] > 0, base, other)
    else:
        col = np.tile(base, (len(xz), 1))
        n_waves = 3 if style == "waves" else 8
        for _ in range(n_waves):
            freq = rng.uniform(0.5, 2.0 if style == "waves" else 5.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(-0.25, 0.25, size=3)
            col = col + amp * np.sin(xz @ freq + phase)[:, None]
    return np.clip(col, 0.02, 0.98)


def _floor(style: str, rng, extent=2.2, spacing=0.08) -> Gaussians:
    ticks = np.arange(-extent, extent + 1e-9, spacing)
    gx, gz = np.meshgrid(ticks, ticks)
    xz = np.stack([gx.ravel(), gz.ravel()], axis=1)
    xz = xz + rng.uniform(-0.15, 0.15, size=xz.shape) * spacing
    n = len(xz)
    pos = np.stack([xz[:, 0], np.zeros(n), xz[:, 1]], axis=1)
    scale = np.tile([0.7 * spacing, 0.01, 0.7 * spacing], (n, 1))
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return Gaussians(pos, scale, rot, np.full(n, 0.95), _floor_color(style, xz, rng), np.zeros(n, dtype=np.int64))


def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def _object(kind: str, center_xz, size, color, instance_id, rng) -> Gaussians:
    """A box shell or a blob resting on the floor (world up is -y)."""
    half = np.asarray(size) / 2.0
    if kind == "box":
        pts = []
        per_face = 60
        for axis in range(3):
            for sign in (-1.0, 1.0):
                p = rng.uniform(-1.0, 1.0, size=(per_face, 3))
                p[:, axis] = sign
                pts.append(p)
        local = np.concatenate(pts) * half
        s = np.tile(half.mean() * 0.22, (len(local), 3))
    else:
        d = rng.normal(size=(300, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = rng.uniform(0.75, 1.0, size=(300, 1))
        local = d * r * half
        s = np.tile(half.mean() * 0.28, (len(local), 3))
    yaw = rng.uniform(0, 2 * np.pi)
    c, sn = np.cos(yaw), np.sin(yaw)
    Ry = np.array([[c, 0, sn], [0, 1, 0], [-sn, 0, c]])
    world = local @ Ry.T + np.array([center_xz[0], -half[1], center_xz[1]])
    n = len(world)
    shade = rng.uniform(-0.08, 0.08, size=(n, 1))
    col = np.clip(color + shade, 0.02, 0.98)
    rot = np.stack([_random_rotation(rng) for _ in range(n)])
    return Gaussians(world, s, rot, np.full(n, 0.9), col, np.full(n, instance_id, dtype=np.int64))


def _place_objects(n, rng, radius=0.9, min_gap=0.55):
    centers = []
    for _ in range(200 * max(n, 1)):
        if len(centers) == n:
            break
        c = rng.uniform(-radius, radius, size=2)
        if all(np.linalg.norm(c - o) > min_gap for o in centers):
            centers.append(c)
    while len(centers) < n:  # crowded: accept overlaps
        centers.append(rng.uniform(-radius, radius, size=2))
    return centers


def _orbit_cameras(cfg: SceneConfig, rng) -> list[Camera]:
    start = rng.uniform(0, 2 * np.pi)
    arc = np.deg2rad(cfg.arc_deg)
    elev = np.deg2rad(cfg.elevation_deg)
    target = np.array([0.0, -0.15, 0.0])
    f = cfg.focal_scale * cfg.image_size
    cams = []
    for k in range(cfg.n_frames):
        az = start + arc * k / (cfg.n_frames - 1) + rng.normal(0, np.deg2rad(1.5))
        el = elev + rng.normal(0, np.deg2rad(2.0))
        r = cfg.orbit_radius * (1 + rng.normal(0, 0.03))
        center = r * np.array([np.cos(el) * np.sin(az), -np.sin(el), -np.cos(el) * np.cos(az)])
        cams.append(look_at(center, target + rng.normal(0, 0.03, 3), f, f, cfg.image_size, cfg.image_size))
    return cams


def gen_scene(seed: int, config: SceneConfig | None = None, **overrides) -> SceneClip:
    """Generate one normalized, fully rendered clip; deterministic in ``seed``."""
    cfg = config or SceneConfig()
    if overrides:
        cfg = SceneConfig(**{**asdict(cfg), **overrides})
    cfg.validate()
    rng = np.random.default_rng(seed)

    parts = [_floor(cfg.background_style, rng)]
    palette_hue = rng.permutation(8)
    for i, c in enumerate(_place_objects(cfg.n_objects, rng)):
        kind = "box" if rng.random() < 0.5 else "blob"
        size = rng.uniform(0.3, 0.55, size=3)
        hue = palette_hue[i] / 8.0
        color = 0.5 + 0.45 * np.cos(2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3])))
        parts.append(_object(kind, c, size, color, i + 1, rng))
    world = Gaussians.concatenate(parts)
    cams = _orbit_cameras(cfg, rng)

    cams, scale, mean = normalize_cameras(cams)
    gt = Gaussians(
        (world.position - mean) / scale, world.scale / scale, world.rotation,
        world.opacity, world.color, world.instance_id,
    )
    frames, depth, inst = [], [], []
    for k, cam in enumerate(cams):
        out = render(gt, cam)
        frames.append(SceneFrame(cam, out.rgb, k))
        depth.append(out.depth.astype(np.float32))
        inst.append(np.stack([out.instance == i + 1 for i in range(cfg.n_objects)])
                    if cfg.n_objects else np.zeros((0, cfg.image_size, cfg.image_size), bool))
    return SceneClip(
        frames=frames,
        gt_gaussians=gt,
        instance_masks=np.stack(inst),
        depth=np.stack(depth),
        scale=scale,
        mean_center=mean,
        far=DEFAULT_FAR,
        meta={"seed": int(seed), "config": asdict(cfg)},
    )


# -- on-disk layout ----------------------------------------------------------

def write_scene(clip: SceneClip, directory) -> Path:
    """scene.json + images/%04d.png + depth/%04d.gidpth + instances/%04d_%02d.png."""
    d = Path(directory)
    for sub in ("images", "depth", "instances"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    frames = []
    for k, fr in enumerate(clip.frames):
        img_rel = f"images/{k:04d}.png"
        dep_rel = f"depth/{k:04d}.gidpth"
        write_png(d / img_rel, fr.image)
        write_depth(d / dep_rel, clip.depth[k])
        inst_rel = []
        for j in range(clip.n_objects):
            rel = f"instances/{k:04d}_{j + 1:02d}.png"
            write_mask_png(d / rel, clip.instance_masks[k, j])
            inst_rel.append(rel)
        frames.append({**fr.camera.to_dict(), "image": img_rel, "depth": dep_rel,
                       "instances": inst_rel, "frame_index": fr.frame_index})
    doc = {
        "frames": frames,
        "n_objects": clip.n_objects,
        "scale": clip.scale,
        "mean_center": [float(v) for v in clip.mean_center],
        "far": clip.far,
        "meta": clip.meta,
    }
    (d / "scene.json").write_text(json.dumps(doc, indent=1))
    if clip.gt_gaussians is not None:
        g = clip.gt_gaussians
        np.savez(d / "gaussians.npz", position=g.position, scale=g.scale, rotation=g.rotation,
                 opacity=g.opacity, color=g.color, instance_id=g.instance_id)
    return d


def read_scene(directory) -> SceneClip:
    d = Path(directory)
    path = d / "scene.json"
    if not path.exists():
        raise FileNotFoundError(f"scene.json not found in {d}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: malformed JSON ({e})") from e
    frames, depth, inst = [], [], []
    for k, fd in enumerate(doc.get("frames", [])):
        try:
            cam = Camera.from_dict(fd)
            img_rel, dep_rel = fd["image"], fd["depth"]
        except KeyError as e:
            raise ValueError(f"{path}: frame {k} missing field {e.args[0]!r}") from e
        except (TypeError, ValueError) as e:
            raise ValueError(f"{path}: frame {k} has an invalid camera ({e})") from e
        img_path = d / img_rel
        if not img_path.exists():
            raise FileNotFoundError(f"{img_path} (frame {k} image) not found")
        img = read_png(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"{img_path}: image is {img.shape[1]}x{img.shape[0]}, camera says {cam.width}x{cam.height}")
        try:
            dep = read_depth(d / dep_rel)
        except (ValueError, FileNotFoundError) as e:
            raise ValueError(f"frame {k} depth: {e}") from e
        masks = [read_mask_png(d / rel) for rel in fd.get("instances", [])]
        frames.append(SceneFrame(cam, img, int(fd.get("frame_index", k))))
        depth.append(dep)
        inst.append(np.stack(masks) if masks else np.zeros((0, cam.height, cam.width), bool))
    if not frames:
        raise ValueError(f"{path}: no frames")
    gt = None
    if (d / "gaussians.npz").exists():
        z = np.load(d / "gaussians.npz")
        gt = Gaussians(z["position"], z["scale"], z["rotation"], z["opacity"], z["color"], z["instance_id"])
    return SceneClip(
        frames=frames,
        gt_gaussians=gt,
        instance_masks=np.stack(inst),
        depth=np.stack(depth),
        scale=float(doc.get("scale", 1.0)),
        mean_center=np.asarray(doc.get("mean_center", [0, 0, 0]), dtype=np.float64),
        far=float(doc.get("far", DEFAULT_FAR)),
        meta=doc.get("meta", {}),
    )
