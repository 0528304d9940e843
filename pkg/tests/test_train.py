import csv
import logging

import numpy as np
import pytest

from gsinpaint.autodiff import Tensor, gradient_check
from gsinpaint.masks import MaskSet, gen_random_masks
from gsinpaint.model import GaussianLRM, ModelConfig, encode_views, flatten_views, stack_inputs
from gsinpaint.synth import gen_scene
from gsinpaint.train import (
    METRICS_HEADER,
    TrainConfig,
    TrainingDiverged,
    build_training_sample,
    forward_loss,
    infer_inpaint,
    object_tracks,
    photometric_loss,
    render_supervision,
    replay_step,
    sample_batch,
    train_stage,
)


def tiny_cfg(size=16):
    return ModelConfig(image_size=size, patch_size=4, token_dim=16, num_blocks=2, num_heads=2)


@pytest.fixture(scope="module")
def clip16():
    return gen_scene(0, image_size=16)


@pytest.fixture(scope="module")
def clip32():
    return gen_scene(0, image_size=32)


def test_supervision_drawn_from_leftover_frames(scene0):
    inputs = {0, 4, 9, 14}
    seen = set()
    for seed in range(200):
        s = build_training_sample(scene0, np.random.default_rng(seed), stage=1, n_supervision=8)
        assert len(s.supervision_indices) == 8 and not inputs & set(s.supervision_indices)
        seen |= set(s.supervision_indices)
    assert seen == set(range(15)) - inputs and len(seen) == 11


def test_reference_view_is_untouched(scene0):
    for seed in range(30):
        s = build_training_sample(scene0, np.random.default_rng(seed), stage=2)
        r = s.reference_index
        frame = scene0.images[s.input_indices[r]]
        assert s.inputs.pixels[r, ..., :3].tobytes() == frame.tobytes()
        assert not s.inputs.mask_channel[r].any()


def test_sample_construction_is_deterministic(scene0):
    a = build_training_sample(scene0, np.random.default_rng(5))
    b = build_training_sample(scene0, np.random.default_rng(5))
    assert a.supervision_indices == b.supervision_indices and a.reference_index == b.reference_index
    assert np.array_equal(a.inputs.pixels, b.inputs.pixels)
    assert np.array_equal(a.masks.masks, b.masks.masks)


@pytest.mark.parametrize("kind", ["object", "geometric", "random"])
def test_every_mask_type_builds(scene0, kind):
    s = build_training_sample(scene0, np.random.default_rng(1), plan=(kind, 2))
    assert s.masks.masks.any()
    assert not s.masks.masks[s.reference_index].any()
    assert s.supervision_regions.shape == (8, 64, 64)


def test_object_fallback_is_logged(caplog):
    clip = gen_scene(4, n_objects=0, image_size=32, n_frames=8)
    assert object_tracks(clip).shape == (0, 8)
    with caplog.at_level(logging.INFO, logger="gsinpaint.train"):
        s = build_training_sample(clip, np.random.default_rng(0), plan=("object", 1))
    assert s.masks.mask_type in ("geometric", "random")
    assert any("fell back" in n for n in s.notes)
    assert "fell back" in caplog.text


def test_photometric_loss_examples():
    rng = np.random.default_rng(0)
    img = rng.uniform(0.2, 0.8, (12, 12, 3))
    assert photometric_loss(Tensor(img), img).item() == 0.0
    _, mse, feat = photometric_loss(Tensor(img), img + 0.1, return_terms=True)
    assert mse.item() == pytest.approx(0.01)
    with pytest.raises(ValueError, match="shape"):
        photometric_loss(Tensor(img), img[:11])


def test_photometric_loss_gradient():
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(0, 1, (12, 12, 3)))
    target = rng.uniform(0, 1, (12, 12, 3))
    assert gradient_check(lambda: photometric_loss(x, target), [x]) < 1e-4


def test_loss_is_nonnegative():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b = rng.uniform(0, 1, (2, 12, 12, 3))
        assert photometric_loss(Tensor(a), b).item() > 0


def test_zero_steps_keeps_initialization(tmp_path, clip16):
    model = GaussianLRM(tiny_cfg(), seed=3)
    init = {k: v.data.copy() for k, v in model.params.items()}
    train_stage(TrainConfig(steps=0, batch_size=1, n_supervision=2), model, [clip16], out_dir=tmp_path)
    back = GaussianLRM.load(tmp_path / "final.gil")
    assert all(np.array_equal(back.params[k].data, v) for k, v in init.items())


def test_stage_two_empty_masks_match_stage_one(clip16):
    cfg1 = TrainConfig(stage=1, batch_size=2, n_supervision=3)
    model = GaussianLRM(tiny_cfg(), seed=0)
    batch = sample_batch(cfg1, [clip16], 0)
    l1, _ = forward_loss(model, cfg1, batch)
    model.expand_patchifier_for_masks()
    l2, _ = forward_loss(model, cfg1, batch)
    assert l1.item() == l2.item()


def test_gradients_reach_every_input_view(clip16):
    cfg = TrainConfig(stage=1, batch_size=1, n_supervision=4)
    model = GaussianLRM(tiny_cfg(), seed=0)
    sample = sample_batch(cfg, [clip16], 0)[0]
    inputs = stack_inputs([sample.inputs])
    raw = Tensor(model.forward(inputs).data, requires_grad=True)
    g = flatten_views(model.activate(raw, inputs))
    loss = photometric_loss(render_supervision(model, g, 0, sample.supervision_cameras[0])[..., :3],
                            sample.supervision_images[0])
    for k in range(1, 4):
        loss = loss + photometric_loss(render_supervision(model, g, 0, sample.supervision_cameras[k])[..., :3],
                                       sample.supervision_images[k])
    loss.backward()
    per_view = np.linalg.norm(raw.grad[0].reshape(4, -1), axis=1)
    assert np.all(per_view > 0)


def test_training_writes_metrics_and_checkpoints(tmp_path, clip16):
    cfg = TrainConfig(steps=4, batch_size=1, n_supervision=2, log_every=2, checkpoint_every=2)
    _, hist = train_stage(cfg, GaussianLRM(tiny_cfg()), [clip16], out_dir=tmp_path)
    assert len(hist) == 4
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert tuple(rows[0]) == METRICS_HEADER and len(rows) == 3
    assert (tmp_path / "step_000002.gil").exists() and (tmp_path / "step_000004.gil").exists()


def test_training_is_deterministic(clip32):
    cfg = TrainConfig(steps=3, batch_size=1, n_supervision=2, stage=2)
    a, _ = train_stage(cfg, GaussianLRM(tiny_cfg(32), seed=1), [clip32])
    b, _ = train_stage(cfg, GaussianLRM(tiny_cfg(32), seed=1), [clip32])
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_nan_loss_dumps_state_and_replays(tmp_path, clip16):
    model = GaussianLRM(tiny_cfg())
    model.params["head.bias"].data[:] = np.nan
    cfg = TrainConfig(steps=3, batch_size=1, n_supervision=2, seed=11)
    with pytest.raises(TrainingDiverged) as err:
        train_stage(cfg, model, [clip16], out_dir=tmp_path)
    dump = err.value.dump_path
    assert dump is not None and dump.exists()
    assert np.isnan(replay_step(dump, [clip16]).loss)


def test_stage_one_rejects_expanded_model(clip16):
    with pytest.raises(ValueError):
        train_stage(TrainConfig(steps=1, batch_size=1, n_supervision=2),
                    GaussianLRM(tiny_cfg(), mask_channel=True), [clip16])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(stage=3)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig().supervision_count(5)
    assert TrainConfig(n_supervision=8).supervision_count(15) == 8
    assert TrainConfig(n_supervision=8).supervision_count(7) == 3


# -- inference ------------------------------------------------------------------------

def _views(clip):
    idx = [0, 4, 9, 14]
    return clip.images[idx], [clip.cameras[k] for k in idx]


def test_noop_inpainting_equals_reconstruction(clip32):
    model = GaussianLRM(tiny_cfg(32), seed=0, mask_channel=True)
    images, cams = _views(clip32)
    g, _ = infer_inpaint(model, images, cams, MaskSet.empty(32, 32, 1), images[1])
    rec = model.predict(stack_inputs([encode_views(images, cams, reference_index=1)]))
    assert np.array_equal(g.position, rec.position.data[0].astype(np.float64))
    assert np.array_equal(g.color, rec.color.data[0].astype(np.float64))


def test_disjoint_regions_in_one_pass(clip32):
    model = GaussianLRM(tiny_cfg(32), seed=0, mask_channel=True)
    images, cams = _views(clip32)
    m = np.zeros((4, 32, 32), bool)
    m[1:, 2:8, 2:8] = True
    m[1:, 20:28, 22:30] = True
    g, timing = infer_inpaint(model, images, cams, MaskSet(m, "random", 0), images[0])
    assert len(g) == 4 * 32 * 32
    parts = timing["tokenize"] + timing["transformer"] + timing["decode"]
    assert abs(parts - timing["total"]) <= 0.01 * timing["total"]


def test_inference_rejects_misaligned_masks(clip32):
    model = GaussianLRM(tiny_cfg(32), mask_channel=True)
    images, cams = _views(clip32)
    with pytest.raises(ValueError, match="align"):
        infer_inpaint(model, images, cams, gen_random_masks(0, 24, 1), images[0])


def test_loss_trend_on_single_scene_overfit():
    clip = gen_scene(0, image_size=16)
    cfg = ModelConfig(image_size=16, patch_size=4, token_dim=32, num_blocks=2, num_heads=2)
    _, hist = train_stage(TrainConfig(stage=1, steps=2000, batch_size=2, n_supervision=4, lr=3e-4),
                          GaussianLRM(cfg, seed=0), [clip])
    loss = np.array([h["loss"] for h in hist]).reshape(20, 100).mean(axis=1)
    # windows are 1-indexed: window 5 covers steps 400..499
    assert np.all(np.diff(loss[4:20]) < 0), loss
