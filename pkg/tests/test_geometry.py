import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsinpaint.geometry import (
    Camera,
    look_at,
    normalize_cameras,
    pixel_rays,
    plucker_rays,
    select_input_views,
    select_validation_views,
)

from conftest import random_camera


def test_plucker_invariants_over_random_cameras():
    rng = np.random.default_rng(0)
    worst_norm = worst_dot = 0.0
    for _ in range(1000):
        cam = random_camera(rng, size=6)
        ray = plucker_rays(cam)
        d, m = ray[..., :3], ray[..., 3:]
        worst_norm = max(worst_norm, np.abs(np.linalg.norm(d, axis=-1) - 1).max())
        worst_dot = max(worst_dot, np.abs((d * m).sum(-1)).max())
    assert worst_norm < 1e-6
    assert worst_dot < 1e-6


def test_principal_ray_is_optical_axis():
    cam = look_at([0, 0, -3], [0, 0, 0], 10, 10, 10, 10)
    d, o = pixel_rays(cam)
    # pixel (4, 4) has its center at 4.5, half a pixel off the principal point 5
    center_ray = (d[4, 4] + d[5, 5] + d[4, 5] + d[5, 4]) / 4
    assert np.allclose(center_ray / np.linalg.norm(center_ray), [0, 0, 1], atol=1e-12)
    assert np.allclose(o, [0, 0, -3])


def test_pixel_ray_hand_example():
    cam = Camera(2.0, 2.0, 2.0, 2.0, np.eye(3), np.zeros(3), 4, 4)
    d, _ = pixel_rays(cam)
    # pixel (0, 0) center (0.5, 0.5): camera direction ((0.5-2)/2, (0.5-2)/2, 1)
    expected = np.array([-0.75, -0.75, 1.0])
    assert np.allclose(d[0, 0], expected / np.linalg.norm(expected))


def test_camera_rejects_bad_intrinsics_and_rotation():
    with pytest.raises(ValueError):
        Camera(-1.0, 1.0, 2.0, 2.0, np.eye(3), np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 5.0, 2.0, np.eye(3), np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 2.0, 2.0, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 4, 4)


def test_camera_dict_round_trip_is_exact():
    rng = np.random.default_rng(1)
    cam = random_camera(rng)
    back = Camera.from_dict(cam.to_dict())
    assert np.array_equal(back.R, cam.R) and np.array_equal(back.t, cam.t)
    assert back.fx == cam.fx and back.cy == cam.cy


def _cams(rng, n):
    return [random_camera(rng) for _ in range(n)]


def test_normalization_bounds_and_idempotence():
    rng = np.random.default_rng(2)
    for _ in range(50):
        cams = _cams(rng, int(rng.integers(2, 10)))
        norm, s, mean = normalize_cameras(cams)
        centers = np.stack([c.center for c in norm])
        assert np.abs(centers).max() <= 1.0 + 1e-12
        assert np.isclose(np.abs(centers).max(), 1.0)
        assert np.allclose(centers.mean(axis=0), 0.0, atol=1e-12)
        again, s2, mean2 = normalize_cameras(norm)
        assert np.isclose(s2, 1.0) and np.allclose(mean2, 0.0, atol=1e-12)
        for a, b in zip(norm, again):
            assert np.allclose(a.t, b.t, atol=1e-12) and np.array_equal(a.R, b.R)


def test_normalization_maps_world_points_consistently():
    rng = np.random.default_rng(3)
    cams = _cams(rng, 5)
    norm, s, mean = normalize_cameras(cams)
    x = rng.normal(size=3)
    for c, n in zip(cams, norm):
        before = c.R @ x + c.t
        after = n.R @ ((x - mean) / s) + n.t
        assert np.allclose(after * s, before)


def test_single_camera_normalization_keeps_unit_scale():
    cam = look_at([1, 2, 3], [0, 0, 0], 8, 8, 8, 8)
    norm, s, mean = normalize_cameras([cam])
    assert s == 1.0
    assert np.allclose(norm[0].center, 0.0)


def test_quartile_views_fifteen_frames():
    assert select_input_views(15) == [0, 4, 9, 14]


@given(st.integers(min_value=5, max_value=500))
def test_quartile_views_properties(n):
    idx = select_input_views(n)
    assert idx[0] == 0 and idx[-1] == n - 1
    assert all(a < b for a, b in zip(idx, idx[1:]))


def test_quartile_views_rejects_short_clips():
    with pytest.raises(ValueError, match="invalid clip"):
        select_input_views(4)


def _brute_force_triangle(centers, rest):
    best, area = None, -1
    for tri in itertools.combinations(rest, 3):
        a, b, c = centers[list(tri)]
        ar = 0.5 * np.linalg.norm(np.cross(b - a, c - a))
        if ar > area:
            best, area = list(tri), ar
    return best


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=4, max_value=12), st.integers(0, 10_000))
def test_validation_views_match_exhaustive_search(n, seed):
    rng = np.random.default_rng(seed)
    cams = _cams(rng, n)
    ref, tri = select_validation_views(cams)
    centers = np.stack([c.center for c in cams])
    assert ref == int(np.argmin(np.linalg.norm(centers - centers.mean(0), axis=1)))
    assert ref not in tri and len(set(tri)) == 3
    assert tri == _brute_force_triangle(centers, [i for i in range(n) if i != ref])


def test_validation_views_greedy_path_for_long_clips():
    rng = np.random.default_rng(5)
    cams = _cams(rng, 40)
    ref, tri = select_validation_views(cams, exhaustive_limit=30)
    assert ref not in tri and len(set(tri)) == 3
    with pytest.raises(ValueError):
        select_validation_views(cams[:3])
