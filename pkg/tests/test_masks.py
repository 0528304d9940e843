import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage, stats

from gsinpaint.geometry import Camera
from gsinpaint.masks import (
    MASK_TYPES,
    MaskSet,
    apply_masks,
    close_mask,
    ellipse_mask,
    filter_object_masks,
    gen_geometric_masks,
    gen_random_masks,
    mask_iou,
    random_rectangles,
    sample_mask_plan,
    sample_ref_ellipses,
    warp_mask,
)

from conftest import random_camera


def test_mask_plan_frequencies_match_policy():
    rng = np.random.default_rng(0)
    plans = [sample_mask_plan(rng) for _ in range(100_000)]
    kinds = np.array([MASK_TYPES.index(k) for k, _ in plans])
    counts = np.array([c for _, c in plans])
    obs = np.bincount(kinds, minlength=3)
    assert stats.chisquare(obs, 100_000 * np.array([0.25, 0.25, 0.5])).pvalue > 0.001
    assert set(counts) == {1, 2, 3, 4}
    assert stats.chisquare(np.bincount(counts)[1:]).pvalue > 0.001


def test_mask_plan_is_deterministic():
    assert [sample_mask_plan(42) for _ in range(3)] == [sample_mask_plan(42)] * 3


def _bbox(mask):
    rows, cols = np.nonzero(mask)
    return rows.max() - rows.min() + 1, cols.max() - cols.min() + 1


def test_single_rectangle_edges_at_size_64():
    for seed in range(200):
        m = random_rectangles(seed, 64, 1)
        h, w = _bbox(m)
        assert 10 <= h <= 16 and 10 <= w <= 16
        assert m.sum() == h * w


def test_random_masks_identical_on_inpaint_views():
    ms = gen_random_masks(3, 64, 3, reference_index=2)
    assert not ms.masks[2].any()
    others = ms.masks[[0, 1, 3]]
    assert np.array_equal(others[0], others[1]) and np.array_equal(others[0], others[2])
    assert np.array_equal(ms.reference_region, others[0])


def test_random_masks_count_zero_is_empty():
    ms = gen_random_masks(0, 32, 0)
    assert not ms.masks.any()


def test_generators_are_pure_functions_of_seed():
    assert np.array_equal(gen_random_masks(9, 48, 4).masks, gen_random_masks(9, 48, 4).masks)
    assert np.array_equal(sample_ref_ellipses(9, 48, 3), sample_ref_ellipses(9, 48, 3))


def test_small_size_rejected():
    with pytest.raises(ValueError):
        random_rectangles(0, 20, 1)
    with pytest.raises(ValueError):
        sample_ref_ellipses(0, 23, 1)


@pytest.mark.parametrize("count,lo,hi", [(1, 12, 16), (2, 12, 16), (3, 8, 12), (4, 8, 12)])
def test_ellipse_axes_follow_count(count, lo, hi):
    # an ellipse with integer center and semi-axis a spans 2 * floor(a) + 1 pixels
    for seed in range(50):
        labels, n = ndimage.label(sample_ref_ellipses(seed, 96, count))
        for sl in ndimage.find_objects(labels):
            h, w = sl[0].stop - sl[0].start, sl[1].stop - sl[1].start
            assert min(h, w) >= 2 * lo + 1
            if count == 1:
                assert max(h, w) <= 2 * hi + 1


def test_ellipse_boundary_pixel_is_included():
    m = ellipse_mask(32, (10, 12), (5, 3))
    assert m[12, 15] and m[12, 5] and m[15, 10] and m[9, 10]
    assert not m[12, 16] and not m[16, 10]


def test_ellipses_lie_inside_image():
    for seed in range(100):
        m = sample_ref_ellipses(seed, 24, 2)
        assert m.any()


# -- geometric warp ---------------------------------------------------------------

def _oracle_warp(ref_mask, depth, ref_cam, cam):
    """Per-pixel warp with explicit homogeneous matrices."""
    def K(c):
        return np.array([[c.fx, 0, c.cx], [0, c.fy, c.cy], [0, 0, 1.0]])

    def E(c):
        m = np.eye(4)
        m[:3, :3], m[:3, 3] = c.R, c.t
        return m

    to_view = E(cam) @ np.linalg.inv(E(ref_cam))
    out = np.zeros((cam.height, cam.width), bool)
    for r, c in zip(*np.nonzero(ref_mask)):
        x = np.linalg.inv(K(ref_cam)) @ np.array([c + 0.5, r + 0.5, 1.0]) * depth[r, c]
        y = (to_view @ np.append(x, 1.0))[:3]
        if y[2] <= 0.01:
            continue
        p = K(cam) @ (y / y[2])
        # nearest pixel center (i + 0.5)
        u, v = int(np.rint(p[0] - 0.5)), int(np.rint(p[1] - 0.5))
        if 0 <= u < cam.width and 0 <= v < cam.height:
            out[v, u] = True
    return out


def test_geometric_warp_matches_per_pixel_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        size = int(rng.integers(24, 40))
        cams = [random_camera(rng, size=size) for _ in range(4)]
        ref = int(rng.integers(0, 4))
        ref_mask = sample_ref_ellipses(rng, size, int(rng.integers(1, 5)))
        depth = rng.uniform(0.5, 4.0, (size, size))
        ms = gen_geometric_masks(ref_mask, depth, cams, ref, closing=False)
        for i in range(4):
            if i == ref:
                assert not ms.masks[i].any()
                continue
            assert np.array_equal(ms.masks[i], _oracle_warp(ref_mask, depth, cams[ref], cams[i]))


def test_identity_warp_reproduces_mask():
    rng = np.random.default_rng(1)
    cam = random_camera(rng, size=32)
    ref_mask = sample_ref_ellipses(1, 32, 2)
    depth = rng.uniform(1, 3, (32, 32))
    assert np.array_equal(warp_mask(ref_mask, depth, cam, cam), ref_mask)
    ms = gen_geometric_masks(ref_mask, depth, [cam] * 4, 0)
    assert np.array_equal(ms.masks[1], close_mask(ref_mask))


def test_translated_camera_shifts_pixel_by_disparity():
    f, d, b = 20.0, 2.0, 0.3
    ref = Camera(f, f, 16, 16, np.eye(3), np.zeros(3), 32, 32)
    # a camera centered at (b, 0, 0) has t = -b
    moved = Camera(f, f, 16, 16, np.eye(3), np.array([-b, 0, 0]), 32, 32)
    m = np.zeros((32, 32), bool)
    m[16, 16] = True
    out = warp_mask(m, np.full((32, 32), d), ref, moved)
    shift = -f * b / d  # -3 pixels
    assert np.argwhere(out).tolist() == [[16, 16 + int(shift)]]


def test_points_behind_camera_are_dropped():
    ref = Camera(10, 10, 12, 12, np.eye(3), np.zeros(3), 24, 24)
    behind = Camera(10, 10, 12, 12, np.eye(3), np.array([0, 0, -5.0]), 24, 24)
    m = np.ones((24, 24), bool)
    assert not warp_mask(m, np.full((24, 24), 2.0), ref, behind).any()


def test_geometric_mask_errors():
    cams = [Camera(10, 10, 12, 12, np.eye(3), np.zeros(3), 24, 24)] * 4
    m = np.zeros((24, 24), bool)
    with pytest.raises(ValueError, match="positive"):
        gen_geometric_masks(m, np.zeros((24, 24)), cams, 0)
    with pytest.raises(ValueError, match="range"):
        gen_geometric_masks(m, np.ones((24, 24)), cams, 4)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.6))
def test_closing_is_extensive(seed, density):
    m = np.random.default_rng(seed).random((20, 20)) < density
    closed = close_mask(m)
    assert np.all(closed[m])


# -- object filters -----------------------------------------------------------------

def _box_track(T, top, left, h, w, size=100):
    track = np.zeros((T, size, size), bool)
    track[:, top:top + h, left:left + w] = True
    return track


def test_large_track_dropped():
    assert filter_object_masks(_box_track(3, 10, 10, 60, 80)).all()  # 0.48
    t = np.zeros((3, 100, 100), bool)
    t[:, 5:95, 5:72] = True  # 0.603
    assert not filter_object_masks(t).any()


def test_tiny_track_dropped():
    t = np.zeros((3, 100, 100), bool)
    t[:, 50:53, 50:60] = True  # 0.003
    assert not filter_object_masks(t).any()


def test_border_track_dropped():
    assert not filter_object_masks(_box_track(3, 1, 40, 20, 20)).any()
    assert filter_object_masks(_box_track(3, 2, 40, 20, 20)).all()


def test_teleporting_track_truncated():
    t = _box_track(5, 20, 20, 15, 15)
    t[3:] = np.roll(t[3:], 40, axis=2)
    assert filter_object_masks(t).tolist() == [True, True, True, False, False]


def test_filter_monotone_in_threshold():
    rng = np.random.default_rng(0)
    for _ in range(30):
        t = _box_track(6, 30, 30, 20, 20)
        for k in range(1, 6):
            t[k] = np.roll(t[k - 1], int(rng.integers(0, 8)), axis=1)
        prev = None
        for tau in np.linspace(0.1, 0.95, 10):
            keep = filter_object_masks(t, iou_threshold=tau)
            if prev is not None:
                assert np.all(keep <= prev)
            prev = keep


def test_filter_rejects_single_frame():
    with pytest.raises(ValueError):
        filter_object_masks(np.zeros((1, 10, 10), bool))


def test_mask_iou_values():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    b = np.zeros((4, 4), bool)
    b[1:3] = True
    assert mask_iou(a, b) == pytest.approx(1 / 3)
    assert mask_iou(a, a) == 1.0 and mask_iou(b * 0, b * 0) == 1.0


# -- application and validation -----------------------------------------------------

def test_apply_masks_examples():
    img = np.random.default_rng(0).random((6, 6, 3))
    assert np.array_equal(apply_masks(img, np.zeros((6, 6), bool)), img)
    assert np.all(apply_masks(img, np.ones((6, 6), bool)) == 0.5)
    checker = (np.add.outer(np.arange(6), np.arange(6)) % 2).astype(bool)
    out = apply_masks(img, checker)
    for r in range(6):
        for c in range(6):
            assert np.array_equal(out[r, c], [0.5] * 3 if checker[r, c] else img[r, c])
    with pytest.raises(ValueError):
        apply_masks(img, np.zeros((5, 6), bool))


def test_maskset_validation():
    m = np.zeros((4, 8, 8), bool)
    m[1, :2] = True
    MaskSet(m, "random", 0)
    with pytest.raises(ValueError, match="reference"):
        MaskSet(m, "random", 1)
    with pytest.raises(ValueError):
        MaskSet(m, "painted", 0)
    big = np.zeros((4, 8, 8), bool)
    big[2, :5] = True
    with pytest.raises(ValueError, match="area"):
        MaskSet(big, "random", 0)
    with pytest.raises(ValueError):
        MaskSet(m[:3], "random", 0)
