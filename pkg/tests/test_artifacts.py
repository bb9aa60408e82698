"""Checkpoint tests: bitwise round trips and whole-manifest validation."""

import json

import numpy as np
import pytest

from blockgrow.artifacts import (CheckpointError, ExperimentConfig,
                                 blob_sha256, checkpoint_paths, config_hash,
                                 load_checkpoint, load_experiment_config,
                                 save_checkpoint, save_experiment_config)
from blockgrow.expansion import (FreezeMask, expand_model, moe_expand,
                                 plan_expansion)
from blockgrow.model import ModelConfig
from blockgrow.training import LoraModel, TrainConfig, attach_lora, train
from conftest import tiny_model

from blockgrow.data import VOCAB_SIZE, derive_rng


def _assert_same_params(a, b):
    pa, pb = a.named_parameters(), b.named_parameters()
    assert [n for n, _ in pa] == [n for n, _ in pb]
    for (name, ta), (_, tb) in zip(pa, pb):
        np.testing.assert_array_equal(ta.data, tb.data, err_msg=name)


# ---------------------------------------------------------------------------
# round trips


def test_round_trip_plain_decoder(tmp_path):
    model = tiny_model(seed=0)
    save_checkpoint(tmp_path / "m", model)
    loaded, mask = load_checkpoint(tmp_path / "m")
    assert mask is None
    assert loaded.config == model.config
    _assert_same_params(model, loaded)
    ids = np.array([1, 2, 3], dtype=np.int64)
    np.testing.assert_array_equal(model.forward(ids).data,
                                  loaded.forward(ids).data)


def test_round_trip_expanded_with_mask_and_provenance(tmp_path):
    base = tiny_model(seed=1)
    save_checkpoint(tmp_path / "base", base)
    plan = plan_expansion(4, 2, 1, "suffix")
    expanded, mask = expand_model(base, plan)
    save_checkpoint(tmp_path / "big", expanded, mask,
                    base_checkpoint_hash=blob_sha256(tmp_path / "base"),
                    expansion_plan=plan,
                    train_config=TrainConfig(total_steps=1, batch_size=1,
                                             seq_len=4))
    loaded, loaded_mask = load_checkpoint(tmp_path / "big")
    _assert_same_params(expanded, loaded)
    assert loaded_mask is not None
    assert loaded_mask.trainable == mask.trainable
    manifest = json.loads((tmp_path / "big.manifest.json").read_text())
    prov = manifest["provenance"]
    assert prov["base_checkpoint"] == blob_sha256(tmp_path / "base")
    assert prov["expansion_plan"]["placement"] == "suffix"
    assert len(prov["train_config"]) == 64  # a config content hash


def test_round_trip_lora(tmp_path):
    base = tiny_model(seed=2)
    wrapped, mask = attach_lora(base, rank=3, seed=5)
    # give the adapters real content so the round trip is not trivially zero
    stream_rng = derive_rng(9, "lora-ckpt")
    stream = iter(lambda: (stream_rng.integers(0, VOCAB_SIZE, (2, 8)),
                           stream_rng.integers(0, VOCAB_SIZE, (2, 8))), None)
    train(wrapped, mask, stream,
          TrainConfig(total_steps=2, batch_size=2, seq_len=8, max_lr=1e-2))
    save_checkpoint(tmp_path / "lo", wrapped, mask)
    loaded, loaded_mask = load_checkpoint(tmp_path / "lo")
    assert isinstance(loaded, LoraModel)
    assert loaded.rank == 3 and loaded.targets == wrapped.targets
    _assert_same_params(wrapped, loaded)
    assert loaded_mask.trainable == mask.trainable
    ids = np.array([4, 5, 6, 7], dtype=np.int64)
    np.testing.assert_array_equal(wrapped.forward(ids).data,
                                  loaded.forward(ids).data)


def test_round_trip_moe(tmp_path):
    base = tiny_model(seed=3)
    moe, mask = moe_expand(base)
    moe.blocks[1].moe.gate.data[:] = [0.4, -0.2]
    save_checkpoint(tmp_path / "moe", moe, mask)
    loaded, _ = load_checkpoint(tmp_path / "moe")
    assert all(b.moe is not None for b in loaded.blocks)
    _assert_same_params(moe, loaded)
    np.testing.assert_array_equal(loaded.blocks[1].moe.gate.data,
                                  np.array([0.4, -0.2], dtype=np.float32))


def test_identical_models_save_byte_identical_files(tmp_path):
    save_checkpoint(tmp_path / "a", tiny_model(seed=4))
    save_checkpoint(tmp_path / "b", tiny_model(seed=4))
    for suffix in (".manifest.json", ".blob"):
        a = (tmp_path / ("a" + suffix)).read_bytes()
        b = (tmp_path / ("b" + suffix)).read_bytes()
        assert a == b


def test_checkpoint_paths_derivation():
    manifest, blob = checkpoint_paths("runs/exp/model")
    assert manifest.name == "model.manifest.json"
    assert blob.name == "model.blob"
    assert manifest.parent == blob.parent


# ---------------------------------------------------------------------------
# validation


@pytest.fixture()
def saved(tmp_path):
    model = tiny_model(seed=5)
    save_checkpoint(tmp_path / "ck", model)
    manifest_path, blob_path = checkpoint_paths(tmp_path / "ck")
    return tmp_path / "ck", manifest_path, blob_path


def _edit_manifest(manifest_path, mutate):
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    mutate(doc)
    manifest_path.write_text(json.dumps(doc), encoding="utf-8")


def test_load_rejects_missing_files(saved, tmp_path):
    base, manifest_path, blob_path = saved
    with pytest.raises(CheckpointError, match="missing manifest"):
        load_checkpoint(tmp_path / "nope")
    blob_path.unlink()
    with pytest.raises(CheckpointError, match="missing blob"):
        load_checkpoint(base)


def test_load_rejects_bad_json(saved):
    base, manifest_path, _ = saved
    manifest_path.write_text("{not json", encoding="utf-8")
    with pytest.raises(CheckpointError, match="not valid JSON"):
        load_checkpoint(base)


def test_load_rejects_wrong_version(saved):
    base, manifest_path, _ = saved
    _edit_manifest(manifest_path, lambda d: d.update(format_version=99))
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(base)


def test_load_rejects_unknown_kind(saved):
    base, manifest_path, _ = saved
    _edit_manifest(manifest_path,
                   lambda d: d["model"].update(kind="transformer"))
    with pytest.raises(CheckpointError, match="kind"):
        load_checkpoint(base)


def test_load_rejects_truncated_blob_naming_first_out_of_range(saved):
    base, manifest_path, blob_path = saved
    blob = blob_path.read_bytes()
    blob_path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="extends to byte"):
        load_checkpoint(base)


def test_load_rejects_hash_mismatch(saved):
    base, manifest_path, blob_path = saved
    blob = bytearray(blob_path.read_bytes())
    blob[0] ^= 0xFF
    blob_path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="blob_sha256 mismatch"):
        load_checkpoint(base)


def test_load_rejects_duplicate_name(saved):
    base, manifest_path, _ = saved
    def dup(doc):
        doc["tensors"].append(dict(doc["tensors"][0]))
    _edit_manifest(manifest_path, dup)
    with pytest.raises(CheckpointError, match="duplicate tensor name"):
        load_checkpoint(base)


def test_load_rejects_length_shape_disagreement(saved):
    base, manifest_path, _ = saved
    def stretch(doc):
        doc["tensors"][0]["shape"][0] += 1
    _edit_manifest(manifest_path, stretch)
    with pytest.raises(CheckpointError, match="disagrees with shape"):
        load_checkpoint(base)


def test_load_rejects_missing_and_extra_tensor(saved):
    base, manifest_path, _ = saved
    def rename(doc):
        entry = next(e for e in doc["tensors"] if e["name"] == "final_norm")
        entry["name"] = "bonus_norm"
    _edit_manifest(manifest_path, rename)
    with pytest.raises(CheckpointError, match="missing tensor 'final_norm'"):
        load_checkpoint(base)


def test_load_rejects_config_shape_disagreement(saved):
    base, manifest_path, _ = saved
    def shrink(doc):
        doc["model"]["config"]["ffn_size"] //= 2
    _edit_manifest(manifest_path, shrink)
    with pytest.raises(CheckpointError):
        load_checkpoint(base)


def test_load_rejects_invalid_config(saved):
    base, manifest_path, _ = saved
    _edit_manifest(manifest_path,
                   lambda d: d["model"]["config"].update(num_heads=5))
    with pytest.raises(CheckpointError, match="model.config"):
        load_checkpoint(base)


def test_load_rejects_bad_mask(saved):
    base, manifest_path, _ = saved
    def poison(doc):
        doc["freeze_mask"] = {"trainable": {"embedding": True}}
    _edit_manifest(manifest_path, poison)
    with pytest.raises(CheckpointError, match="freeze_mask"):
        load_checkpoint(base)


def test_loaded_arrays_are_writable_copies(saved):
    base, _, _ = saved
    loaded, _ = load_checkpoint(base)
    loaded.embedding.data[0, 0] = 42.0  # frombuffer views would refuse this
    assert loaded.embedding.data[0, 0] == 42.0


# ---------------------------------------------------------------------------
# experiment config


def test_experiment_config_round_trip(tmp_path):
    cfg = ExperimentConfig(
        model=ModelConfig(vocab_size=VOCAB_SIZE, hidden_size=16, num_heads=2,
                          ffn_size=32, num_blocks=4, max_seq_len=16),
        train=TrainConfig(total_steps=10, batch_size=2, seq_len=8,
                          adam_betas=(0.9, 0.97)),
        corpora={"domain": {"chars": 1000}},
        expansion={"groups": 2, "copies": 1, "placement": "interleaved"},
    )
    path = tmp_path / "exp.json"
    save_experiment_config(cfg, path)
    loaded = load_experiment_config(path)
    assert loaded == cfg
    assert isinstance(loaded.train.adam_betas, tuple)
    assert config_hash(loaded.train) == config_hash(cfg.train)
    assert config_hash(loaded.train) != config_hash(cfg.model)
