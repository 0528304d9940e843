"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL line.

The lines are also collected and repeated in the pytest terminal summary.
"""
import os
import time

import numpy as np
import pytest

from gsinpaint.checks import OP_CASES, check_op, check_render
from gsinpaint.evaluate import paired_wins, run_benchmark
from gsinpaint.experiments import run_overfit
from gsinpaint.geometry import look_at, normalize_cameras, plucker_rays, select_input_views
from gsinpaint.masks import (
    MASK_TYPES,
    close_mask,
    filter_object_masks,
    gen_geometric_masks,
    sample_mask_plan,
    sample_ref_ellipses,
    warp_mask,
)
from gsinpaint.model import GaussianLRM, ModelConfig
from gsinpaint.render import Gaussians, render
from gsinpaint.synth import gen_scene
from gsinpaint.train import TrainConfig, train_stage

from cli_pipeline import replay_matches, run_pipeline
from conftest import ACCEPTANCE_LINES, random_camera
from test_masks import _oracle_warp
from test_render import axis_camera, random_gaussians, single

CORES = os.cpu_count() or 1


def report(n: int, ok: bool, detail: str):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_criterion_1_geometry():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_norm = worst_dot = 0.0
    for _ in range(1000):
        ray = plucker_rays(random_camera(rng, size=6))
        d, m = ray[..., :3], ray[..., 3:]
        worst_norm = max(worst_norm, np.abs(np.linalg.norm(d, axis=-1) - 1).max())
        worst_dot = max(worst_dot, np.abs((d * m).sum(-1)).max())
    norm_ok = True
    for _ in range(50):
        cams = [random_camera(rng) for _ in range(int(rng.integers(2, 10)))]
        norm, _, _ = normalize_cameras(cams)
        again, s2, mean2 = normalize_cameras(norm)
        centers = np.stack([c.center for c in norm])
        norm_ok &= bool(np.abs(centers).max() <= 1 + 1e-12 and np.isclose(s2, 1.0)
                        and np.allclose(mean2, 0, atol=1e-12)
                        and all(np.allclose(a.t, b.t, atol=1e-12) for a, b in zip(norm, again)))
    quart = select_input_views(15)
    secs = time.perf_counter() - t0
    ok = worst_norm < 1e-6 and worst_dot < 1e-6 and norm_ok and quart == [0, 4, 9, 14] and secs < 10
    report(1, ok, f"|d|-1 {worst_norm:.1e}, d.m {worst_dot:.1e}, normalization ok={norm_ok}, "
                  f"quartiles {quart}, {secs:.1f}s (limit 10s)")


def test_criterion_2_autodiff():
    t0 = time.perf_counter()
    errs = {name: check_op(name, n_instances=100) for name in OP_CASES}
    secs = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = all(e < 1e-4 for e in errs.values()) and secs < 120
    report(2, ok, f"{len(errs)} ops x 100 instances, worst {worst} {errs[worst]:.1e} (limit 1e-4), "
                  f"{secs:.1f}s (limit 120s)")


def _two_gaussian_pixel():
    cam = axis_camera(4, f=4.0)
    z1, z2 = 2.0, 3.0
    red = single([-0.5 * z1 / 4, -0.5 * z1 / 4, z1], [0.05] * 3, 0.5, [1, 0, 0])
    blue = single([-0.5 * z2 / 4, -0.5 * z2 / 4, z2], [0.05] * 3, 1.0, [0, 0, 1])
    return render(Gaussians.concatenate([blue, red]), cam).rgb[1, 1]


def test_criterion_3_renderer():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    exact = 0
    for _ in range(20):
        size = int(rng.integers(9, 40))
        cam = look_at(rng.normal(0, 0.3, 3) + [0, 0, -2.5], [0, 0, 0], size, size, size, size)
        g = random_gaussians(rng, int(rng.integers(1, 200)))
        a, b = render(g, cam, tiled=True), render(g, cam, tiled=False)
        exact += all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("rgb", "depth", "alpha", "instance"))
    pix_err = float(np.abs(_two_gaussian_pixel() - [0.5, 0.0, 0.5]).max())
    fd = check_render(n_scenes=10)
    secs = time.perf_counter() - t0
    ok = exact == 20 and pix_err < 1e-6 and fd < 1e-3 and secs < 300
    report(3, ok, f"tiled==naive on {exact}/20 scenes, two-Gaussian error {pix_err:.1e} (limit 1e-6), "
                  f"render+backward FD {fd:.1e} (limit 1e-3), {secs:.1f}s (limit 300s)")


def test_criterion_4_masks():
    from scipy import stats

    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    oracle_hits = 0
    for _ in range(50):
        size = int(rng.integers(24, 40))
        cams = [random_camera(rng, size=size) for _ in range(4)]
        ref = int(rng.integers(0, 4))
        region = sample_ref_ellipses(rng, size, int(rng.integers(1, 5)))
        depth = rng.uniform(0.5, 4.0, (size, size))
        ms = gen_geometric_masks(region, depth, cams, ref, closing=False)
        oracle_hits += all(np.array_equal(ms.masks[i], _oracle_warp(region, depth, cams[ref], cams[i]))
                           for i in range(4) if i != ref)
    cam = random_camera(rng, size=32)
    region = sample_ref_ellipses(1, 32, 2)
    depth = rng.uniform(1, 3, (32, 32))
    identity_ok = np.array_equal(warp_mask(region, depth, cam, cam), region) and np.array_equal(
        gen_geometric_masks(region, depth, [cam] * 4, 0).masks[1], close_mask(region))
    draw_rng = np.random.default_rng(1)
    kinds = np.bincount([MASK_TYPES.index(sample_mask_plan(draw_rng)[0]) for _ in range(100_000)], minlength=3)
    p = stats.chisquare(kinds, 100_000 * np.array([0.25, 0.25, 0.5])).pvalue

    def const_track(area_rows, area_cols):
        t = np.zeros((3, 100, 100), bool)
        t[:, 5:5 + area_rows, 5:5 + area_cols] = True
        return t

    big_dropped = not filter_object_masks(const_track(90, 67)).any()  # area 0.603
    small = np.zeros((3, 100, 100), bool)
    small[:, 50:53, 50:60] = True  # area 0.003
    small_dropped = not filter_object_masks(small).any()
    tele = np.zeros((5, 100, 100), bool)
    tele[:3, 20:35, 20:35] = True
    tele[3:, 20:35, 60:75] = True
    truncated = filter_object_masks(tele).tolist() == [True, True, True, False, False]
    secs = time.perf_counter() - t0
    ok = oracle_hits == 50 and identity_ok and p > 0.001 and big_dropped and small_dropped and truncated \
        and secs < 180
    report(4, ok, f"warp==oracle on {oracle_hits}/50 scenes, identity ok={identity_ok}, "
                  f"type counts {kinds.tolist()} p={p:.3f}, filters large/small/teleport "
                  f"{big_dropped}/{small_dropped}/{truncated}, {secs:.1f}s (limit 180s)")


def test_criterion_5_stage_equivalence():
    from gsinpaint.model import encode_views, stack_inputs

    t0 = time.perf_counter()
    clip = gen_scene(0)
    idx = select_input_views(len(clip))
    inputs = stack_inputs([encode_views(clip.images[idx], [clip.cameras[k] for k in idx])])
    model = GaussianLRM(ModelConfig(), seed=0)
    before = model.forward(inputs).data
    model.expand_patchifier_for_masks()
    after = model.forward(inputs).data
    secs = time.perf_counter() - t0
    same = np.array_equal(before, after)
    report(5, same and secs < 30, f"bit-exact={same} on a 64x64 default-config forward, {secs:.1f}s (limit 30s)")


def test_criterion_6_overfit():
    res = run_overfit(scene_seed=0, stage1_steps=2000, stage2_steps=1000, progress_every=100)
    drop, change = res.masked_drop, res.unmasked_psnr_change
    minutes = res.seconds / 60
    # the 45 minute budget is stated for an 8-core machine; it is only enforced on one
    time_ok = minutes < 45 if CORES >= 8 else True
    ok = drop >= 0.8 and change >= -1.0 and time_ok
    report(6, ok, f"masked MSE {res.before['masked_mse']:.5f} -> {res.after['masked_mse']:.5f} "
                  f"(drop {drop:.1%}, need >= 80%), unmasked PSNR {res.before['unmasked_psnr']:.2f} -> "
                  f"{res.after['unmasked_psnr']:.2f} dB (change {change:+.2f}, need >= -1), "
                  f"{minutes:.1f} min on {CORES} core(s) (45 min limit applies to 8 cores)")


@pytest.mark.slow
def test_criterion_7_generalization(tmp_path):
    t0 = time.perf_counter()
    train_scenes = [gen_scene(s) for s in range(200)]
    eval_scenes = [gen_scene(s) for s in range(100_000, 100_020)]
    cfg = ModelConfig()
    untrained = GaussianLRM(cfg, seed=0, mask_channel=True)
    model, _ = train_stage(TrainConfig(stage=1, steps=6000, seed=0), GaussianLRM(cfg, seed=0),
                           train_scenes, out_dir=tmp_path / "stage1")
    model, _ = train_stage(TrainConfig(stage=2, steps=4000, seed=1), model, train_scenes,
                           out_dir=tmp_path / "stage2")
    trained = run_benchmark(model, eval_scenes, "gt_reference")
    base = run_benchmark(untrained, eval_scenes, "gt_reference")
    wins, n = paired_wins(trained, base, "m_psnr")
    hours = (time.perf_counter() - t0) / 3600
    ok = n == 20 and wins >= 18 and (hours < 6 if CORES >= 8 else True)
    report(7, ok, f"trained beats untrained on masked PSNR in {wins}/{n} unseen scenes (need >= 18/20), "
                  f"mean m_psnr {trained.aggregate.get('m_psnr', float('nan')):.2f} vs "
                  f"{base.aggregate.get('m_psnr', float('nan')):.2f}, {hours:.2f} h on {CORES} core(s)")


def test_criterion_8_replay_determinism(tmp_path):
    t0 = time.perf_counter()
    dirs = run_pipeline(tmp_path / "first")
    failures = {}
    for name, d in dirs.items():
        same, diff = replay_matches(d, tmp_path / "replay" / name)
        if not same:
            failures[name] = diff
    secs = time.perf_counter() - t0
    ok = not failures and secs < 300
    report(8, ok, f"{len(dirs) - len(failures)}/{len(dirs)} commands replayed bit-identically "
                  f"({', '.join(dirs)}), failures {failures or 'none'}, {secs:.1f}s (limit 300s)")
