import numpy as np
import pytest
from scipy import stats

from gsinpaint.evaluate import EvalReport, paired_wins, run_benchmark, scene_masks
from gsinpaint.geometry import select_validation_views
from gsinpaint.metrics import PSNR_CAP, mse, psnr, ssim
from gsinpaint.model import GaussianLRM, ModelConfig


def test_psnr_examples():
    rng = np.random.default_rng(0)
    a = rng.uniform(0.2, 0.8, (16, 16, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    b = a.copy()
    m = np.zeros((16, 16), bool)
    m[:5] = True
    b[~m] = 1 - b[~m]
    assert psnr(a, b, m) == PSNR_CAP
    assert psnr(a, b) < 30


def test_metric_errors():
    a = np.zeros((16, 16, 3))
    with pytest.raises(ValueError, match="no pixels"):
        psnr(a, a, np.zeros((16, 16), bool))
    with pytest.raises(ValueError):
        psnr(a, np.zeros((16, 15, 3)))
    with pytest.raises(ValueError, match="at least"):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_ssim_examples():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, (16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0)
    gray = np.full((16, 16, 3), 0.5)
    assert ssim(gray, 1 - gray) == pytest.approx(1.0)


def test_ssim_is_symmetric():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = rng.uniform(0, 1, (2, 12, 12, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_full_mask_matches_unmasked():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(0, 1, (2, 16, 16, 3))
    full = np.ones((16, 16), bool)
    assert abs(psnr(a, b, full) - psnr(a, b)) < 1e-12
    assert abs(ssim(a, b, full) - ssim(a, b)) < 1e-12
    assert abs(mse(a, b, full) - mse(a, b)) < 1e-12


def test_metrics_decrease_with_noise():
    rng = np.random.default_rng(4)
    img = rng.uniform(0.2, 0.8, (24, 24, 3))
    amps = np.linspace(0.01, 0.3, 20)
    for metric in (psnr, ssim):
        vals, xs = [], []
        for seed in range(10):
            noise = np.random.default_rng(seed).normal(size=img.shape)
            for amp in amps:
                vals.append(metric(img, img + amp * noise))
                xs.append(amp)
        assert stats.spearmanr(xs, vals).statistic < -0.9


# -- benchmark -------------------------------------------------------------------------

def small_model(seed=0):
    cfg = ModelConfig(image_size=32, patch_size=4, token_dim=16, num_blocks=2, num_heads=2)
    return GaussianLRM(cfg, seed=seed, mask_channel=True)


def test_benchmark_is_deterministic(small_scenes):
    model = small_model()
    a = run_benchmark(model, small_scenes, "gt_reference")
    b = run_benchmark(model, small_scenes, "gt_reference")
    assert a.to_json(include_timing=False) == b.to_json(include_timing=False)
    assert len(a.per_scene) == 3 and "psnr" in a.aggregate
    assert "mean" in a.table()


def test_reconstruction_protocol_omits_masked_metrics(small_scenes):
    rep = run_benchmark(small_model(), small_scenes[:1], "reconstruction")
    assert "m_psnr" not in rep.per_scene[0] and "m_psnr" not in rep.aggregate
    assert rep.per_scene[0]["mask"] == "none"


def test_gt_reference_masks_cover_held_out_frames(small_scenes):
    clip = small_scenes[0]
    ref_frame, tri = select_validation_views(clip.cameras)
    inputs = sorted([ref_frame, *tri])
    ref = inputs.index(ref_frame)
    holdout = [k for k in range(len(clip)) if k not in inputs]
    masks, held = scene_masks(clip, inputs, ref, holdout, seed=0)
    assert not masks.masks[ref].any() and masks.masks.any()
    assert held.shape == (len(holdout), 32, 32)


def test_missing_checkpoint(tmp_path, small_scenes):
    with pytest.raises(FileNotFoundError):
        run_benchmark(tmp_path / "nope.gil", small_scenes)
    with pytest.raises(ValueError):
        run_benchmark(small_model(), small_scenes, "fid")


def test_report_round_trip(tmp_path, small_scenes):
    rep = run_benchmark(small_model(), small_scenes[:2])
    rep.write(tmp_path / "r.json")
    assert EvalReport.read(tmp_path / "r.json") == rep


def test_paired_wins_counts_strict_improvements():
    mk = lambda vals: EvalReport("gt_reference", [{"scene": i, "m_psnr": v} for i, v in enumerate(vals)],  # noqa: E731
                                 {}, {}, "x")
    assert paired_wins(mk([10, 12, 9, 5]), mk([9, 12, 8, 6])) == (2, 4)
    with pytest.raises(ValueError):
        paired_wins(mk([1]), EvalReport("gt_reference", [{"scene": 7, "m_psnr": 0}], {}, {}, "x"))
