import numpy as np
import pytest

from adaptformer import checkpoint as ckpt
from adaptformer.checkpoint import CheckpointError
from adaptformer.data import TaskSpec, generate
from adaptformer.harness import TrainConfig, predict_logits, prepare, train
from adaptformer.tensor import Rng
from adaptformer.tuning import AdapterConfig, adapter_shapes
from adaptformer.vit import VitConfig, VitModel, param_shapes

SMALL = VitConfig(image_size=8, patch_size=4, embed_dim=16, num_layers=2, num_heads=2, mlp_ratio=2, num_classes=3)

EXAMPLE_HEX = (
    "4144464d434b505401000000070000007b2276223a317d01000000010077010200000000000000"
    "000000000000f03f00000000000000c07886fe67ba4484d889aa8ec41f0b242f914fbf6bae1be2"
    "ed23f56a007e3547b0"
)


def test_documented_byte_layout():
    blob, digest = ckpt.encode({"w": np.array([1.0, -2.0])}, {"v": 1})
    assert blob.hex() == EXAMPLE_HEX
    assert digest == EXAMPLE_HEX[-64:]


def test_round_trip_bit_exact_and_byte_identical(tmp_path):
    rng = Rng(0)
    tensors = {"a": rng.normal((3, 4)), "b.c": rng.normal(5), "scalar": np.array(np.pi), "empty": np.zeros((0, 2))}
    d1 = ckpt.save(tensors, tmp_path / "x.ckpt", {"k": [1, 2]})
    loaded = ckpt.load(tmp_path / "x.ckpt")
    assert list(loaded.tensors) == list(tensors)
    for n, a in tensors.items():
        assert loaded.tensors[n].shape == a.shape
        assert loaded.tensors[n].tobytes() == np.ascontiguousarray(a).tobytes()
    assert loaded.metadata == {"k": [1, 2]} and loaded.digest == d1
    ckpt.save(loaded.tensors, tmp_path / "y.ckpt", loaded.metadata)
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()


def test_special_values_survive(tmp_path):
    vals = np.array([np.nan, np.inf, -np.inf, -0.0, 5e-324, np.finfo(float).max])
    ckpt.save({"v": vals}, tmp_path / "s.ckpt")
    assert ckpt.load(tmp_path / "s.ckpt").tensors["v"].tobytes() == vals.tobytes()


def test_corrupted_payload_rejected(tmp_path):
    path = tmp_path / "c.ckpt"
    ckpt.save({"w": np.arange(10.0)}, path)
    raw = bytearray(path.read_bytes())
    raw[-40] ^= 0x01  # inside the payload section
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="hash mismatch"):
        ckpt.load(path)


@pytest.mark.parametrize("mutate", [lambda b: b"XXXXXXXX" + b[8:], lambda b: b[:20], lambda b: b[:-1]])
def test_malformed_files_rejected(tmp_path, mutate):
    blob, _ = ckpt.encode({"w": np.arange(3.0)})
    with pytest.raises(CheckpointError):
        ckpt.decode(mutate(blob))


def test_unwritable_path_names_path(tmp_path):
    target = tmp_path / "missing" / "x.ckpt"
    with pytest.raises(OSError, match="missing"):
        ckpt.save({"w": np.zeros(1)}, target)


def test_no_temp_files_left(tmp_path):
    ckpt.save({"w": np.zeros(4)}, tmp_path / "w.ckpt")
    assert [p.name for p in tmp_path.iterdir()] == ["w.ckpt"]


def test_encoded_size_matches_file(tmp_path):
    m = prepare(VitModel(SMALL, seed=1), "adaptformer", 3, 0, AdapterConfig(mid_dim=4))
    meta = {"note": "x"}
    ckpt.save(ckpt.model_state(m), tmp_path / "m.ckpt", meta)
    shapes = {n: a.shape for n, a in ckpt.model_state(m).items()}
    assert ckpt.encoded_size(shapes, meta) == (tmp_path / "m.ckpt").stat().st_size


# ---------------------------------------------------------------- model subsets

@pytest.fixture(scope="module")
def tuned():
    """A small backbone plus an AdaptFormer fine-tune on it."""
    task = generate(TaskSpec(image_size=8, num_classes=3, train_count=48, eval_count=24, seed=2))
    base = VitModel(SMALL, seed=4)
    model = prepare(VitModel(SMALL, seed=4), "adaptformer", 3, 1, AdapterConfig(mid_dim=4))
    train(model, task.train, task.eval,
          TrainConfig(base_lr=0.5, batch_size=16, warmup_epochs=1, total_epochs=2, tuning_mode="adaptformer"))
    return base, model, task


def test_delta_holds_count_law_values(tmp_path, tuned):
    _, model, _ = tuned
    ckpt.save_model(model, tmp_path / "d.ckpt", ("adapters", "head"))
    stored = ckpt.load(tmp_path / "d.ckpt").tensors
    d, mid, layers, c = 16, 4, 2, 3
    buffers = 2 * d  # BatchNorm running mean and variance
    assert sum(a.size for a in stored.values()) == layers * (2 * d * mid + mid + d) + d * c + c + buffers


def test_backbone_plus_delta_reproduces_logits(tmp_path, tuned):
    base, model, task = tuned
    ckpt.save_model(base, tmp_path / "bb.ckpt", "all")
    ckpt.save_model(model, tmp_path / "delta.ckpt", ("adapters", "head"))
    rebuilt = VitModel(SMALL, seed=99)
    ckpt.load_into(rebuilt, tmp_path / "bb.ckpt", "backbone")
    rebuilt.add_adapters(AdapterConfig(mid_dim=4), Rng(5))
    ckpt.load_into(rebuilt, tmp_path / "delta.ckpt", "adapters")
    ckpt.load_into(rebuilt, tmp_path / "delta.ckpt", "head")
    np.testing.assert_array_equal(predict_logits(rebuilt, task.eval.images), predict_logits(model, task.eval.images))


def test_full_save_load_keeps_eval_output(tmp_path, tuned):
    _, model, task = tuned
    before = predict_logits(model, task.eval.images)
    ckpt.save_model(model, tmp_path / "all.ckpt")
    other = prepare(VitModel(SMALL, seed=7), "adaptformer", 3, 9, AdapterConfig(mid_dim=4))
    ckpt.load_into(other, tmp_path / "all.ckpt", "all")
    np.testing.assert_array_equal(predict_logits(other, task.eval.images), before)
    assert list(other.params) == list(model.params)


def test_loading_adapters_into_plain_model_lists_names(tmp_path, tuned):
    _, model, _ = tuned
    ckpt.save_model(model, tmp_path / "d.ckpt", ("adapters", "head"))
    with pytest.raises(CheckpointError, match=r"adapters\.0\.down_proj\.weight"):
        ckpt.load_into(VitModel(SMALL), tmp_path / "d.ckpt", "adapters")


def test_no_partial_application_on_shape_mismatch(tmp_path, tuned):
    _, model, _ = tuned
    state = dict(ckpt.model_state(model))
    state["blocks.1.mlp.fc2.bias"] = np.zeros(3)
    ckpt.save(state, tmp_path / "bad.ckpt")
    victim = VitModel(SMALL, seed=11)
    victim.add_adapters(AdapterConfig(mid_dim=4), Rng(0))
    before = {n: t.data.copy() for n, t in victim.params.items()}
    with pytest.raises(CheckpointError, match="shape mismatch"):
        ckpt.load_into(victim, tmp_path / "bad.ckpt", "all")
    assert all(np.array_equal(before[n], t.data) for n, t in victim.params.items())


def test_subset_load_touches_only_subset(tmp_path, tuned):
    _, model, _ = tuned
    ckpt.save_model(model, tmp_path / "all.ckpt")
    target = prepare(VitModel(SMALL, seed=12), "adaptformer", 3, 3, AdapterConfig(mid_dim=4))
    before = {n: t.data.copy() for n, t in target.params.items()}
    ckpt.load_into(target, tmp_path / "all.ckpt", "head")
    for n, t in target.params.items():
        changed = not np.array_equal(before[n], t.data)
        assert changed == (ckpt.subset_of(n) == "head"), n


def test_multi_task_storage_below_two_percent_per_task():
    vit = VitConfig(image_size=224, patch_size=16, embed_dim=768, num_layers=12, num_heads=12, num_classes=174)
    backbone = {n: s for n, s in param_shapes(vit).items() if ckpt.subset_of(n) == "backbone"}
    head = {n: s for n, s in param_shapes(vit).items() if ckpt.subset_of(n) == "head"}
    head.update({"head_norm.running_mean": (768,), "head_norm.running_var": (768,)})
    delta = {**adapter_shapes(AdapterConfig(mid_dim=64), vit), **head}
    base_bytes = ckpt.encoded_size(backbone)
    delta_bytes = ckpt.encoded_size(delta)
    assert delta_bytes / base_bytes < 0.02
    for k in (1, 5, 20):
        assert (base_bytes + k * delta_bytes) - base_bytes < 0.02 * k * base_bytes
