"""Training masks: object tracks, depth-warped ellipses and random rectangles.

Every generator is a pure function of its seed and inputs. Masks are boolean
(H, W) arrays; 255 in the PNG files means masked.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import Camera
from .model import GRAY, N_VIEWS
from .render.projection import Z_NEAR

MASK_TYPES = ("object", "geometric", "random")
MASK_TYPE_PROBS = (0.25, 0.25, 0.50)
MAX_AREA = 0.5
CLOSING_SIZE = 5


@dataclass
class MaskSet:
    """Per-input-view fill masks plus the region they hide in the reference view.

    ``masks[reference_index]`` is always empty: the reference image is never
    grayed. ``reference_region`` marks where the edited content sits in the
    reference view; only the ``reference_only`` / ``all_views`` encodings use it.
    """

    masks: np.ndarray  # (4, H, W) bool
    mask_type: str
    reference_index: int
    reference_region: np.ndarray | None = None

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3 or self.masks.shape[0] != N_VIEWS:
            raise ValueError(f"masks must have shape (4, H, W), got {self.masks.shape}")
        if self.mask_type not in MASK_TYPES:
            raise ValueError(f"mask_type must be one of {MASK_TYPES}, got {self.mask_type!r}")
        if not 0 <= self.reference_index < N_VIEWS:
            raise ValueError(f"reference_index {self.reference_index} out of range")
        if self.masks[self.reference_index].any():
            raise ValueError("the reference view mask must be empty")
        area = self.masks.mean(axis=(1, 2))
        if area.max() > MAX_AREA:
            raise ValueError(f"mask area fraction {area.max():.3f} exceeds {MAX_AREA}")
        if self.reference_region is None:
            self.reference_region = np.zeros(self.masks.shape[1:], dtype=bool)
        self.reference_region = np.asarray(self.reference_region, dtype=bool)
        if self.reference_region.shape != self.masks.shape[1:]:
            raise ValueError("reference_region must match the mask size")

    @property
    def size(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]

    @classmethod
    def empty(cls, height: int, width: int, reference_index: int = 0,
              mask_type: str = "random") -> "MaskSet":
        return cls(np.zeros((N_VIEWS, height, width), bool), mask_type, reference_index)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_mask_plan(seed) -> tuple[str, int]:
    """Draw (mask_type, mask_count): types at 25/25/50 %, count uniform in 1..4."""
    rng = _rng(seed)
    kind = MASK_TYPES[int(rng.choice(3, p=MASK_TYPE_PROBS))]
    return kind, int(rng.integers(1, 5))


def _check_size(size: int):
    if size < 24:
        raise ValueError(f"image size must be at least 24 pixels, got {size}")


def random_rectangles(seed, size: int, count: int) -> np.ndarray:
    """Union of ``count`` rectangles, edges in [size/6, size/4] truncated to int."""
    _check_size(size)
    rng = _rng(seed)
    out = np.zeros((size, size), dtype=bool)
    for _ in range(count):
        h, w = (int(v) for v in rng.uniform(size / 6, size / 4, size=2))
        top = int(rng.integers(0, size - h + 1))
        left = int(rng.integers(0, size - w + 1))
        out[top:top + h, left:left + w] = True
    return out


def gen_random_masks(seed, size: int, count: int, reference_index: int = 0) -> MaskSet:
    """The same rectangle union on every inpaint view; no cross-view consistency."""
    union = random_rectangles(seed, size, count)
    masks = np.stack([union if i != reference_index else np.zeros_like(union)
                      for i in range(N_VIEWS)])
    return MaskSet(masks, "random", reference_index, reference_region=union)


def ellipse_mask(size: int, center, axes) -> np.ndarray:
    """Axis-aligned ellipse over pixel centers, boundary included.

    ``center`` is (cx, cy) in pixel-index units, ``axes`` the semi-axes (a, b).
    """
    cx, cy = center
    a, b = axes
    ys, xs = np.mgrid[0:size, 0:size]
    return ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0


def sample_ref_ellipses(seed, size: int, count: int) -> np.ndarray:
    """Union of ``count`` ellipses lying fully inside the image.

    Semi-axes are drawn from [size/8, size/6] for one or two ellipses and
    from [size/12, size/8] for three or four.
    """
    _check_size(size)
    rng = _rng(seed)
    lo, hi = (size / 8, size / 6) if count <= 2 else (size / 12, size / 8)
    out = np.zeros((size, size), dtype=bool)
    for _ in range(count):
        a, b = rng.uniform(lo, hi, size=2)
        cx = int(rng.integers(int(np.ceil(a)), int(np.floor(size - 1 - a)) + 1))
        cy = int(rng.integers(int(np.ceil(b)), int(np.floor(size - 1 - b)) + 1))
        out |= ellipse_mask(size, (cx, cy), (a, b))
    return out


def warp_mask(ref_mask: np.ndarray, depth_ref: np.ndarray, ref_cam: Camera, cam: Camera) -> np.ndarray:
    """Unproject masked reference pixels with their depth and splat them into ``cam``.

    Each point lands on the pixel whose center is nearest its projection.
    Points behind the near plane or outside the image are dropped. No
    morphological cleanup is applied here.
    """
    rows, cols = np.nonzero(ref_mask)
    z = np.asarray(depth_ref, dtype=np.float64)[rows, cols]
    x_cam = np.stack([
        (cols + 0.5 - ref_cam.cx) / ref_cam.fx * z,
        (rows + 0.5 - ref_cam.cy) / ref_cam.fy * z,
        z,
    ], axis=1)
    world = (x_cam - ref_cam.t) @ ref_cam.R  # R^T (x - t), row-vector form
    view = world @ cam.R.T + cam.t
    out = np.zeros((cam.height, cam.width), dtype=bool)
    front = view[:, 2] > Z_NEAR
    view = view[front]
    u = np.floor(cam.fx * view[:, 0] / view[:, 2] + cam.cx)
    v = np.floor(cam.fy * view[:, 1] / view[:, 2] + cam.cy)
    inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    out[v[inside].astype(np.int64), u[inside].astype(np.int64)] = True
    return out


def close_mask(mask: np.ndarray, size: int = CLOSING_SIZE) -> np.ndarray:
    """Dilate then erode with a square element.

    The erosion treats out-of-image pixels as set, so closing never removes
    a pixel that was already in the mask, including along the border.
    """
    st = np.ones((size, size), dtype=bool)
    grown = ndimage.binary_dilation(mask, structure=st, border_value=0)
    return ndimage.binary_erosion(grown, structure=st, border_value=1)


def gen_geometric_masks(ref_mask, depth_ref, cameras: list[Camera], ref_index: int,
                        closing: bool = True) -> MaskSet:
    """Warp a reference-view mask into the other three input views via depth."""
    if not 0 <= ref_index < len(cameras):
        raise ValueError(f"reference index {ref_index} out of range for {len(cameras)} cameras")
    if len(cameras) != N_VIEWS:
        raise ValueError(f"expected {N_VIEWS} cameras, got {len(cameras)}")
    ref_mask = np.asarray(ref_mask, dtype=bool)
    depth_ref = np.asarray(depth_ref, dtype=np.float64)
    if depth_ref.shape != ref_mask.shape:
        raise ValueError(f"depth shape {depth_ref.shape} does not match mask {ref_mask.shape}")
    if not np.all(depth_ref > 0):
        raise ValueError("reference depth must be strictly positive")
    ref_cam = cameras[ref_index]
    masks = []
    for i, cam in enumerate(cameras):
        if i == ref_index:
            masks.append(np.zeros((cam.height, cam.width), dtype=bool))
            continue
        m = warp_mask(ref_mask, depth_ref, ref_cam, cam)
        masks.append(close_mask(m) if closing else m)
    return MaskSet(np.stack(masks), "geometric", ref_index, reference_region=ref_mask)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def filter_object_masks(track, iou_threshold: float = 0.5, border_margin: float = 0.02,
                        min_area: float = 0.005, max_area: float = MAX_AREA) -> np.ndarray:
    """Which frames of one instance track survive the sanity filters.

    The whole track is dropped if its first-frame area is outside
    [min_area, max_area] or its first-frame bounding box reaches into the
    border margin. Otherwise frames are kept until the first frame whose IoU
    with its predecessor is below ``iou_threshold``.
    """
    track = np.asarray(track, dtype=bool)
    if track.ndim != 3 or track.shape[0] < 2:
        raise ValueError(f"track must be (T >= 2, H, W), got {track.shape}")
    T, H, W = track.shape
    keep = np.zeros(T, dtype=bool)
    first = track[0]
    area = first.mean()
    if area > max_area or area < min_area:
        return keep
    rows, cols = np.nonzero(first)
    my, mx = border_margin * H, border_margin * W
    if rows.min() < my or rows.max() + 1 > H - my or cols.min() < mx or cols.max() + 1 > W - mx:
        return keep
    keep[0] = True
    for t in range(1, T):
        if mask_iou(track[t], track[t - 1]) < iou_threshold:
            break
        keep[t] = True
    return keep


def apply_masks(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace masked pixels with mid gray."""
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image shape {image.shape[:2]}")
    out = image.copy()
    out[mask] = GRAY
    return out
