"""Pixel-aligned Gaussian reconstruction transformer.

Four posed views (RGB + Plücker rays, plus an optional mask channel) are cut
into p x p patches, embedded, run through a stack of pre-LN self-attention
blocks, and decoded by one linear layer into 12 Gaussian parameters per
pixel. There are no positional embeddings: the ray channels carry position.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Camera, pixel_rays, plucker_rays

N_VIEWS = 4
N_PARAMS = 12
GRAY = 0.5
MASK_MODES = ("reference_only", "all_views", "inpaint_views")

# raw channel layout
DIST, SCALE, ROT, OPACITY, COLOR = slice(0, 1), slice(1, 4), slice(4, 8), slice(8, 9), slice(9, 12)


@dataclass
class ModelConfig:
    patch_size: int = 4
    token_dim: int = 128
    num_blocks: int = 4
    num_heads: int = 4
    image_size: int = 64
    gaussian_params: int = N_PARAMS
    mask_encoding_mode: str = "inpaint_views"
    mlp_ratio: int = 4
    near: float = 0.2
    far: float = 4.0
    scale_min: float = 0.002
    scale_max: float = 0.08
    init_std: float = 0.02
    head_init_std: float = 1e-3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.token_dim % self.num_heads:
            raise ValueError(f"token_dim {self.token_dim} not divisible by num_heads {self.num_heads}")
        if self.gaussian_params != N_PARAMS:
            raise ValueError(f"gaussian_params is fixed at {N_PARAMS}")
        if self.mask_encoding_mode not in MASK_MODES:
            raise ValueError(f"mask_encoding_mode must be one of {MASK_MODES}")
        if self.near >= self.far:
            raise ValueError(f"near ({self.near}) must be below far ({self.far})")
        if not 0 < self.scale_min < self.scale_max:
            raise ValueError("need 0 < scale_min < scale_max")

    @property
    def tokens_per_view(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @classmethod
    def paper_preset(cls) -> "ModelConfig":
        """Full-size configuration (256 px, patch 8, 1024-d). Not trained here."""
        return cls(patch_size=8, token_dim=1024, num_blocks=24, num_heads=16, image_size=256)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """(..., H, W, C) -> (..., H/p * W/p, p*p*C), features ordered (row, col, channel)."""
    *lead, H, W, C = x.shape
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} not divisible by patch size {p}")
    x = x.reshape(*lead, H // p, p, W // p, p, C)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, (H // p) * (W // p), p * p * C)


def unpatchify(t: Tensor, H: int, W: int, p: int, q: int) -> Tensor:
    """Differentiable inverse of ``patchify`` for a (B, V, T, p*p*q) tensor."""
    B, V = t.shape[:2]
    t = t.reshape(B, V, H // p, W // p, p, p, q)
    t = t.transpose(0, 1, 2, 4, 3, 5, 6)
    return t.reshape(B, V, H, W, q)


def apply_gray(image: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return image
    out = image.copy()
    out[np.asarray(mask, dtype=bool)] = GRAY
    return out


class ViewInputs(NamedTuple):
    """Constant per-view inputs for one batch: arrays of shape (B, 4, H, W, ...)."""

    pixels: np.ndarray  # RGB (gray-filled where masked) + 6 Plücker channels
    mask_channel: np.ndarray  # (B, 4, H, W), zeros where a view carries no mask
    ray_dirs: np.ndarray  # (B, 4, H, W, 3)
    ray_origins: np.ndarray  # (B, 4, H, W, 3)


def encode_views(
    images,
    cameras,
    fill_masks=None,
    region_masks=None,
    reference_index: int = 0,
    mode: str = "inpaint_views",
) -> ViewInputs:
    """Build the channel stack for one sample of four views.

    ``fill_masks[i]`` marks pixels replaced by gray (never the reference).
    ``region_masks[i]`` is the inpaint region in view i, including the
    reference view's region, used by the ``reference_only`` / ``all_views``
    encodings. ``mode`` decides which views expose their mask channel.
    """
    if len(images) != N_VIEWS or len(cameras) != N_VIEWS:
        raise ValueError(f"expected {N_VIEWS} views, got {len(images)} images and {len(cameras)} cameras")
    if mode not in MASK_MODES:
        raise ValueError(f"unknown mask encoding mode {mode!r}")
    pix, chan, dirs, origins = [], [], [], []
    for i, (img, cam) in enumerate(zip(images, cameras)):
        img = np.asarray(img, dtype=np.float64)
        if img.shape != (cam.height, cam.width, 3):
            raise ValueError(f"view {i}: image shape {img.shape} does not match camera {cam.height}x{cam.width}")
        fill = None if fill_masks is None else fill_masks[i]
        if fill is not None and i == reference_index and np.any(fill):
            raise ValueError("the reference view must stay intact")
        if fill is not None and np.shape(fill) != img.shape[:2]:
            raise ValueError(f"view {i}: mask shape {np.shape(fill)} does not match image {img.shape[:2]}")
        region = fill if region_masks is None else region_masks[i]
        if mode == "inpaint_views":
            ch = None if i == reference_index else fill
        elif mode == "all_views":
            ch = region
        else:
            ch = region if i == reference_index else None
        ray = plucker_rays(cam)
        pix.append(np.concatenate([apply_gray(img, fill), ray], axis=-1))
        chan.append(np.zeros(img.shape[:2]) if ch is None else np.asarray(ch, dtype=np.float64))
        d, o = pixel_rays(cam)
        dirs.append(d)
        origins.append(np.broadcast_to(o, d.shape))
    return ViewInputs(np.stack(pix), np.stack(chan), np.stack(dirs), np.stack(origins))


def stack_inputs(samples: list[ViewInputs]) -> ViewInputs:
    return ViewInputs(*(np.stack(parts) for parts in zip(*samples)))


class GaussianTensors(NamedTuple):
    position: Tensor
    scale: Tensor
    rotation: Tensor
    opacity: Tensor
    color: Tensor
    distance: Tensor


def activate(raw: Tensor, ray_dirs, ray_origins, near: float, far: float,
             scale_min: float, scale_max: float) -> GaussianTensors:
    """Map raw (..., 12) parameters to world-space Gaussians on each pixel's ray."""
    if near >= far:
        raise ValueError(f"near ({near}) must be below far ({far})")
    dtype = raw.dtype
    distance = ad.sigmoid(raw[..., DIST]) * (far - near) + near
    position = ad.concat([distance] * 3, axis=-1) * np.asarray(ray_dirs, dtype=dtype) \
        + np.asarray(ray_origins, dtype=dtype)
    scale = ad.sigmoid(raw[..., SCALE]) * (scale_max - scale_min) + scale_min
    rotation = ad.l2_normalize(raw[..., ROT] + np.array([1.0, 0.0, 0.0, 0.0], dtype=dtype))
    opacity = ad.sigmoid(raw[..., OPACITY])
    color = ad.sigmoid(raw[..., COLOR])
    return GaussianTensors(position, scale, rotation, opacity, color, distance)


def flatten_views(g: GaussianTensors) -> GaussianTensors:
    """(B, V, H, W, k) per-pixel maps -> (B, V*H*W, k) Gaussian lists."""
    out = []
    for t in g:
        B = t.shape[0]
        out.append(t.reshape(B, -1, t.shape[-1]))
    return GaussianTensors(*out)


class GaussianLRM:
    """Transformer weights plus forward pass; parameters live in ``self.params``."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, mask_channel: bool = False, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        D, p = cfg.token_dim, cfg.patch_size
        hidden = cfg.mlp_ratio * D

        def normal(*shape, std=cfg.init_std):
            return Tensor(rng.normal(0.0, std, size=shape).astype(self.dtype), requires_grad=True)

        def const(value, *shape):
            return Tensor(np.full(shape, value, dtype=self.dtype), requires_grad=True)

        P = {"patch.weight": normal(p * p * 9, D), "patch.bias": const(0.0, D)}
        for i in range(cfg.num_blocks):
            P.update({
                f"block{i}.ln1.gain": const(1.0, D),
                f"block{i}.ln1.bias": const(0.0, D),
                f"block{i}.attn.qkv.weight": normal(D, 3 * D),
                f"block{i}.attn.qkv.bias": const(0.0, 3 * D),
                f"block{i}.attn.out.weight": normal(D, D),
                f"block{i}.attn.out.bias": const(0.0, D),
                f"block{i}.ln2.gain": const(1.0, D),
                f"block{i}.ln2.bias": const(0.0, D),
                f"block{i}.mlp.fc1.weight": normal(D, hidden),
                f"block{i}.mlp.fc1.bias": const(0.0, hidden),
                f"block{i}.mlp.fc2.weight": normal(hidden, D),
                f"block{i}.mlp.fc2.bias": const(0.0, D),
            })
        P.update({
            "final_ln.gain": const(1.0, D),
            "final_ln.bias": const(0.0, D),
            "head.weight": normal(D, p * p * N_PARAMS, std=cfg.head_init_std),
            "head.bias": const(0.0, p * p * N_PARAMS),
        })
        self.params: dict[str, Tensor] = P
        if mask_channel:
            self.expand_patchifier_for_masks()

    # -- patchifier ----------------------------------------------------------
    @property
    def has_mask_channel(self) -> bool:
        return "patch.mask_weight" in self.params

    def patchifier_weight(self) -> np.ndarray:
        """The patch embedding as one (p, p, C, D) kernel, C = 9 or 10."""
        p, D = self.cfg.patch_size, self.cfg.token_dim
        w = self.params["patch.weight"].data.reshape(p, p, 9, D)
        if not self.has_mask_channel:
            return w.copy()
        wm = self.params["patch.mask_weight"].data.reshape(p, p, 1, D)
        return np.concatenate([w, wm], axis=2)

    def expand_patchifier_for_masks(self) -> None:
        """Add the mask input channel, initialized to the mean of the RGB weights."""
        if self.has_mask_channel:
            raise ValueError("patchifier already has a mask channel")
        p, D = self.cfg.patch_size, self.cfg.token_dim
        w = self.params["patch.weight"].data
        if w.shape != (p * p * 9, D):
            raise ValueError(f"stage-1 patchifier must have 9 input channels, got weight {w.shape}")
        rgb = w.reshape(p, p, 9, D)[:, :, :3, :].astype(np.float64)
        mean = rgb.mean(axis=2).reshape(p * p, D)
        self.params["patch.mask_weight"] = Tensor(mean.astype(self.dtype), requires_grad=True)

    # -- forward -------------------------------------------------------------
    def tokenize(self, inputs: ViewInputs) -> Tensor:
        """(B, 4, H, W, 9) pixels (+ mask channel) -> (B, 4 * T, D) tokens."""
        p = self.cfg.patch_size
        B, V, H, W, C = inputs.pixels.shape
        if H != self.cfg.image_size or W != self.cfg.image_size:
            raise ValueError(f"expected {self.cfg.image_size}x{self.cfg.image_size} views, got {H}x{W}")
        if C != 9:
            raise ValueError(f"expected 9 pixel channels (RGB + Plücker), got {C}")
        x = patchify(inputs.pixels.astype(self.dtype), p).reshape(B, V * (H // p) * (W // p), -1)
        tok = Tensor(x) @ self.params["patch.weight"]
        if self.has_mask_channel:
            m = patchify(inputs.mask_channel[..., None].astype(self.dtype), p)
            tok = tok + Tensor(m.reshape(B, -1, p * p)) @ self.params["patch.mask_weight"]
        elif np.any(inputs.mask_channel):
            raise ValueError("mask channel given but the patchifier has no mask input (run stage-2 expansion)")
        return tok + self.params["patch.bias"]

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return ad.layer_norm(x) * self.params[f"{name}.gain"] + self.params[f"{name}.bias"]

    def _block(self, x: Tensor, i: int) -> Tensor:
        P, cfg = self.params, self.cfg
        B, S, D = x.shape
        h = cfg.num_heads
        dh = D // h
        y = self._ln(x, f"block{i}.ln1")
        qkv = y @ P[f"block{i}.attn.qkv.weight"] + P[f"block{i}.attn.qkv.bias"]
        qkv = qkv.reshape(B, S, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)))
        y = (att @ v).transpose(0, 2, 1, 3).reshape(B, S, D)
        x = x + (y @ P[f"block{i}.attn.out.weight"] + P[f"block{i}.attn.out.bias"])
        y = self._ln(x, f"block{i}.ln2")
        y = ad.gelu(y @ P[f"block{i}.mlp.fc1.weight"] + P[f"block{i}.mlp.fc1.bias"])
        return x + (y @ P[f"block{i}.mlp.fc2.weight"] + P[f"block{i}.mlp.fc2.bias"])

    def transformer(self, tokens: Tensor) -> Tensor:
        expected = N_VIEWS * self.cfg.tokens_per_view
        if tokens.shape[1] != expected:
            raise ValueError(f"expected {expected} tokens, got {tokens.shape[1]}")
        for i in range(self.cfg.num_blocks):
            tokens = self._block(tokens, i)
        return tokens

    def decode(self, tokens: Tensor) -> Tensor:
        """Tokens -> per-pixel raw maps (B, 4, H, W, 12)."""
        cfg = self.cfg
        B = tokens.shape[0]
        out = self._ln(tokens, "final_ln") @ self.params["head.weight"] + self.params["head.bias"]
        out = out.reshape(B, N_VIEWS, cfg.tokens_per_view, -1)
        return unpatchify(out, cfg.image_size, cfg.image_size, cfg.patch_size, N_PARAMS)

    def forward(self, inputs: ViewInputs) -> Tensor:
        if inputs.pixels.shape[1] != N_VIEWS:
            raise ValueError(f"forward takes exactly {N_VIEWS} views, got {inputs.pixels.shape[1]}")
        return self.decode(self.transformer(self.tokenize(inputs)))

    def activate(self, raw: Tensor, inputs: ViewInputs) -> GaussianTensors:
        c = self.cfg
        return activate(raw, inputs.ray_dirs, inputs.ray_origins, c.near, c.far, c.scale_min, c.scale_max)

    def predict(self, inputs: ViewInputs) -> GaussianTensors:
        """forward + activate, flattened to (B, 4*H*W, k) Gaussian lists."""
        return flatten_views(self.activate(self.forward(inputs), inputs))

    def predict_from_tokens(self, tokens: Tensor, inputs: ViewInputs) -> GaussianTensors:
        """decode + activate for tokens that already went through the transformer."""
        return flatten_views(self.activate(self.decode(tokens), inputs))

    # -- persistence -----------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if "patch.mask_weight" in state and not self.has_mask_channel:
            self.params["patch.mask_weight"] = Tensor(np.zeros((1, 1), self.dtype), requires_grad=True)
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if k != "patch.mask_weight" and v.shape != self.params[k].shape:
                raise ValueError(f"{k}: checkpoint shape {v.shape} != model shape {self.params[k].shape}")
            self.params[k] = Tensor(np.array(v, dtype=self.dtype), requires_grad=True)

    def save(self, path) -> None:
        path = Path(path)
        ad.save_arrays(path, self.state_dict())
        path.with_suffix(".json").write_text(self.cfg.to_json())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "GaussianLRM":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} not found")
        cfg = ModelConfig.from_dict(json.loads(path.with_suffix(".json").read_text()))
        state = ad.load_arrays(path)
        model = cls(cfg, mask_channel="patch.mask_weight" in state, dtype=dtype)
        model.load_state_dict(state)
        return model

    def n_parameters(self) -> int:
        return sum(v.data.size for v in self.params.values())

