import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptformer.data import (
    TaskSpec,
    export_dataset,
    frames_variant,
    generate,
    import_dataset,
    with_shift,
)
from adaptformer.harness import TrainConfig, evaluate, prepare, train
from adaptformer.vit import VitConfig, VitModel

SPEC = TaskSpec(num_classes=3, train_count=60, eval_count=30, seed=4)


def test_same_spec_same_bytes():
    a, b = generate(SPEC), generate(SPEC)
    assert a.train.images.tobytes() == b.train.images.tobytes()
    assert a.eval.labels.tobytes() == b.eval.labels.tobytes()
    assert generate(with_shift(SPEC, "none", seed=5)).train.images.tobytes() != a.train.images.tobytes()


def test_images_are_unit_range_float64():
    d = generate(SPEC)
    assert d.train.images.dtype == np.float64 and d.train.images.shape == (60, 16, 16, 3)
    assert d.train.images.min() >= 0.0 and d.train.images.max() <= 1.0


def test_train_eval_disjoint():
    d = generate(SPEC)
    train_rows = {img.tobytes() for img in d.train.images}
    assert not any(img.tobytes() in train_rows for img in d.eval.images)


@settings(max_examples=20)
@given(st.integers(2, 6), st.integers(0, 40), st.integers(0, 1000),
       st.sampled_from(["none", "hue-rotation", "texture-swap", "label-regroup"]))
def test_labels_balanced(c, extra, seed, shift):
    spec = TaskSpec(image_size=4, num_classes=c, train_count=c + extra, eval_count=c, seed=seed, shift=shift)
    for split in (generate(spec).train, generate(spec).eval):
        counts = np.bincount(split.labels, minlength=c)
        assert counts.max() - counts.min() <= 1


def test_spec_validation():
    with pytest.raises(ValueError):
        generate(TaskSpec(num_classes=4, train_count=3))
    with pytest.raises(ValueError):
        generate(TaskSpec(shift="rotate"))


def test_label_regroup_keeps_images_and_changes_partition():
    base = generate(TaskSpec(num_classes=2, train_count=64, eval_count=16, seed=9))
    regroup = generate(TaskSpec(num_classes=2, train_count=64, eval_count=16, seed=9, shift="label-regroup"))
    assert base.train.images.tobytes() == regroup.train.images.tobytes()
    lat = regroup.train.latents
    np.testing.assert_array_equal(regroup.train.labels, (lat["orient"] + lat["warm"]) % 2)
    assert not np.array_equal(base.train.labels, regroup.train.labels)
    # neither factor alone predicts the regrouped label
    for factor in (lat["orient"], lat["warm"]):
        for v in (0, 1):
            assert abs(regroup.train.labels[factor == v].mean() - 0.5) < 0.2


@pytest.mark.parametrize("shift", ["hue-rotation", "texture-swap"])
def test_appearance_shifts_keep_labels(shift):
    base = generate(SPEC)
    shifted = generate(with_shift(SPEC, shift))
    np.testing.assert_array_equal(base.train.labels, shifted.train.labels)
    assert not np.array_equal(base.train.images, shifted.train.images)


def test_zero_noise_binary_task_is_linearly_separable_on_random_features():
    task = generate(TaskSpec(num_classes=2, noise=0.0, train_count=64, eval_count=64, seed=11))
    m = prepare(VitModel(VitConfig(num_classes=2), seed=3), "linear", 2, 0)
    cfg = TrainConfig(base_lr=1.0, batch_size=16, warmup_epochs=1, total_epochs=30, tuning_mode="linear")
    _, m = train(m, task.train, None, cfg)
    assert evaluate(m, task.eval) >= 0.9


# ---------------------------------------------------------------- frames

def test_one_frame_is_base_dataset():
    a, b = frames_variant(SPEC, 1), generate(SPEC)
    assert a.train.images.tobytes() == b.train.images.tobytes()


@pytest.mark.parametrize("frames", [2, 4, 8])
def test_clips_share_labels_and_start_from_still(frames):
    base = generate(SPEC)
    clips = frames_variant(SPEC, frames)
    assert clips.train.images.shape == (60, frames, 16, 16, 3)
    assert clips.train.num_frames == frames
    np.testing.assert_array_equal(clips.train.labels, base.train.labels)
    np.testing.assert_array_equal(clips.train.images[:, 0], base.train.images)
    assert not np.array_equal(clips.train.images[:, 1], clips.train.images[:, 0])


def test_eight_frame_token_count():
    clips = frames_variant(SPEC, 8)
    m = VitModel(VitConfig(num_classes=3))
    m.set_frames(8)
    assert m.patch_embed(clips.eval.images[:2]).shape[1] == 8 * m.config.patches_per_frame + 1


def test_invalid_frame_count():
    with pytest.raises(ValueError):
        frames_variant(SPEC, 3)


def test_dataset_export_round_trip(tmp_path):
    d = generate(SPEC)
    h1 = export_dataset(d.train, tmp_path / "a.bin", SPEC)
    h2 = export_dataset(d.train, tmp_path / "b.bin", SPEC)
    assert h1 == h2 and (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    back = import_dataset(tmp_path / "a.bin")
    assert back.images.tobytes() == d.train.images.tobytes()
    np.testing.assert_array_equal(back.labels, d.train.labels)
    np.testing.assert_array_equal(back.latents["orient"], d.train.latents["orient"])
