"""Checkpoints as a JSON manifest plus one raw float32 blob.

The pair `<name>.manifest.json` / `<name>.blob` is deliberately primitive:
little-endian 32-bit floats concatenated in parameter order, described by a
sorted-keys manifest with a content hash. Identical models therefore save to
byte-identical files, and any language can reread them. The manifest is
validated in full (version, name uniqueness, shapes, offsets, hash) before a
single tensor is materialized.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .expansion import ExpansionPlan, FreezeMask
from .model import (BlockWeights, DecoderModel, ModelConfig, MoEBlockExtension)
from .tensor import Tensor
from .training import LoraAdapter, LoraModel, TrainConfig

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Manifest or blob failed validation; the message names the field."""


def config_hash(cfg) -> str:
    """Stable content hash for a config dataclass."""
    payload = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def checkpoint_paths(path_base: str | Path) -> tuple[Path, Path]:
    base = Path(path_base)
    return (base.with_name(base.name + ".manifest.json"),
            base.with_name(base.name + ".blob"))


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _expected_shapes(config: ModelConfig, moe_blocks: set[int],
                     lora: dict | None) -> dict[str, tuple[int, ...]]:
    d, f, v = config.hidden_size, config.ffn_size, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embedding": (v, d)}
    matrix = {"w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
              "w1": (d, f), "w2": (d, f), "w3": (f, d)}
    for i in range(config.num_blocks):
        shapes[f"blocks.{i}.attn_norm"] = (d,)
        shapes[f"blocks.{i}.ffn_norm"] = (d,)
        for name, shape in matrix.items():
            shapes[f"blocks.{i}.{name}"] = shape
        if i in moe_blocks:
            shapes[f"blocks.{i}.moe_w3_hat"] = (f, d)
            shapes[f"blocks.{i}.moe_gate"] = (2,)
        if lora is not None:
            rank = lora["rank"]
            for target in lora["targets"]:
                fan_in, fan_out = matrix[target]
                shapes[f"blocks.{i}.lora.{target}.a"] = (fan_in, rank)
                shapes[f"blocks.{i}.lora.{target}.b"] = (rank, fan_out)
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, v)
    return shapes


def save_checkpoint(path_base: str | Path, model, mask: FreezeMask | None = None,
                    *, base_checkpoint_hash: str | None = None,
                    expansion_plan: ExpansionPlan | None = None,
                    train_config: TrainConfig | None = None) -> tuple[Path, Path]:
    """Write `<path_base>.manifest.json` and `<path_base>.blob` atomically."""
    manifest_path, blob_path = checkpoint_paths(path_base)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    named = model.named_parameters()
    directory = []
    chunks = []
    offset = 0
    for name, t in named:
        raw = np.ascontiguousarray(t.data.astype("<f4", copy=False)).tobytes()
        directory.append({"name": name, "shape": list(t.shape),
                          "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    if isinstance(model, LoraModel):
        model_meta = {"kind": "lora",
                      "config": asdict(model.config),
                      "lora": {"rank": model.rank,
                               "targets": list(model.targets)}}
    else:
        model_meta = {"kind": "decoder",
                      "config": asdict(model.config),
                      "lora": None}
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": model_meta,
        "tensors": directory,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "freeze_mask": ({"trainable": dict(sorted(mask.trainable.items()))}
                        if mask is not None else None),
        "provenance": {
            "base_checkpoint": base_checkpoint_hash,
            "expansion_plan": (json.loads(expansion_plan.to_json())
                               if expansion_plan is not None else None),
            "train_config": (config_hash(train_config)
                             if train_config is not None else None),
        },
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    try:
        _atomic_write(blob_path, blob)
        _atomic_write(manifest_path, text.encode("utf-8"))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint at {path_base}: {exc}") from exc
    return manifest_path, blob_path


def blob_sha256(path_base: str | Path) -> str:
    _, blob_path = checkpoint_paths(path_base)
    return hashlib.sha256(blob_path.read_bytes()).hexdigest()


def _validate_directory(directory: list[dict], blob_len: int) -> None:
    names = [entry["name"] for entry in directory]
    seen = set()
    for name in names:
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen.add(name)
    prev_end = 0
    for entry in sorted(directory, key=lambda e: e["offset"]):
        name, shape = entry["name"], tuple(entry["shape"])
        length, offset = entry["length"], entry["offset"]
        want = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        if length != want:
            raise CheckpointError(
                f"tensor {name!r}: length {length} disagrees with shape "
                f"{shape} (expected {want})")
        if offset < prev_end:
            raise CheckpointError(f"tensor {name!r}: offset {offset} overlaps "
                                  f"the previous tensor")
        if offset + length > blob_len:
            raise CheckpointError(
                f"tensor {name!r}: extends to byte {offset + length} but the "
                f"blob has only {blob_len} bytes")
        prev_end = offset + length


def _build_decoder(config: ModelConfig, arrays: dict[str, np.ndarray],
                   moe_blocks: set[int]) -> DecoderModel:
    def tensor(name: str) -> Tensor:
        return Tensor(arrays[name])

    blocks = []
    for i in range(config.num_blocks):
        moe = None
        if i in moe_blocks:
            moe = MoEBlockExtension(tensor(f"blocks.{i}.moe_w3_hat"),
                                    tensor(f"blocks.{i}.moe_gate"))
        blocks.append(BlockWeights(
            attn_norm=tensor(f"blocks.{i}.attn_norm"),
            w_q=tensor(f"blocks.{i}.w_q"),
            w_k=tensor(f"blocks.{i}.w_k"),
            w_v=tensor(f"blocks.{i}.w_v"),
            w_o=tensor(f"blocks.{i}.w_o"),
            ffn_norm=tensor(f"blocks.{i}.ffn_norm"),
            w1=tensor(f"blocks.{i}.w1"),
            w2=tensor(f"blocks.{i}.w2"),
            w3=tensor(f"blocks.{i}.w3"),
            moe=moe,
        ))
    return DecoderModel(config, tensor("embedding"), blocks,
                        tensor("final_norm"), tensor("lm_head"))


def load_checkpoint(path_base: str | Path):
    """Reconstruct (model, mask-or-None); rejects any invalid manifest whole."""
    manifest_path, blob_path = checkpoint_paths(path_base)
    if not manifest_path.exists():
        raise CheckpointError(f"missing manifest {manifest_path}")
    if not blob_path.exists():
        raise CheckpointError(f"missing blob {blob_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"manifest is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"format_version {version!r} unsupported (expected {FORMAT_VERSION})")
    model_meta = manifest.get("model") or {}
    kind = model_meta.get("kind")
    if kind not in ("decoder", "lora"):
        raise CheckpointError(f"model.kind {kind!r} unsupported")
    try:
        config = ModelConfig(**model_meta["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"model.config invalid: {exc}") from exc
    lora_meta = model_meta.get("lora")
    if kind == "lora":
        if not lora_meta or "rank" not in lora_meta or "targets" not in lora_meta:
            raise CheckpointError("model.lora metadata missing for lora checkpoint")
    else:
        lora_meta = None

    directory = manifest.get("tensors")
    if not isinstance(directory, list) or not directory:
        raise CheckpointError("tensors directory missing or empty")
    blob = blob_path.read_bytes()
    _validate_directory(directory, len(blob))
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest.get("blob_sha256"):
        raise CheckpointError(
            f"blob_sha256 mismatch: manifest says {manifest.get('blob_sha256')!r}, "
            f"blob hashes to {digest!r}")

    names = {entry["name"] for entry in directory}
    moe_blocks = {i for i in range(config.num_blocks)
                  if f"blocks.{i}.moe_w3_hat" in names}
    expected = _expected_shapes(config, moe_blocks, lora_meta)
    missing = sorted(set(expected) - names)
    extra = sorted(names - set(expected))
    if missing:
        raise CheckpointError(f"missing tensor {missing[0]!r}")
    if extra:
        raise CheckpointError(f"unexpected tensor {extra[0]!r}")
    for entry in directory:
        if tuple(entry["shape"]) != expected[entry["name"]]:
            raise CheckpointError(
                f"tensor {entry['name']!r}: shape {tuple(entry['shape'])} "
                f"disagrees with config (expected {expected[entry['name']]})")

    arrays: dict[str, np.ndarray] = {}
    for entry in directory:
        flat = np.frombuffer(blob, dtype="<f4", count=entry["length"] // 4,
                             offset=entry["offset"])
        arrays[entry["name"]] = flat.reshape(tuple(entry["shape"])).copy()

    base_names = [n for n in names if ".lora." not in n]
    base_arrays = {n: arrays[n] for n in base_names}
    base = _build_decoder(config, base_arrays, moe_blocks)
    if kind == "decoder":
        model = base
    else:
        adapters = {}
        for i in range(config.num_blocks):
            for target in lora_meta["targets"]:
                adapters[(i, target)] = LoraAdapter(
                    Tensor(arrays[f"blocks.{i}.lora.{target}.a"]),
                    Tensor(arrays[f"blocks.{i}.lora.{target}.b"]))
        model = LoraModel(base, adapters, lora_meta["rank"],
                          tuple(lora_meta["targets"]))

    mask = None
    mask_meta = manifest.get("freeze_mask")
    if mask_meta is not None:
        mask = FreezeMask({str(k): bool(v)
                           for k, v in mask_meta["trainable"].items()})
        try:
            mask.validate_against(model)
        except ValueError as exc:
            raise CheckpointError(f"freeze_mask invalid: {exc}") from exc
    return model, mask


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass
class ExperimentConfig:
    """One JSON document tying together a whole run."""

    model: ModelConfig
    train: TrainConfig
    corpora: dict[str, dict] = field(default_factory=dict)
    expansion: dict | None = None  # {"groups": N, "copies": P, "placement": s}

    def to_json_dict(self) -> dict:
        return {"model": asdict(self.model), "train": asdict(self.train),
                "corpora": self.corpora, "expansion": self.expansion}

    @classmethod
    def from_json_dict(cls, payload: dict) -> "ExperimentConfig":
        train_kwargs = dict(payload["train"])
        if "adam_betas" in train_kwargs:
            train_kwargs["adam_betas"] = tuple(train_kwargs["adam_betas"])
        return cls(model=ModelConfig(**payload["model"]),
                   train=TrainConfig(**train_kwargs),
                   corpora=dict(payload.get("corpora", {})),
                   expansion=payload.get("expansion"))


def save_experiment_config(cfg: ExperimentConfig, path: str | Path) -> None:
    payload = json.dumps(cfg.to_json_dict(), indent=2, sort_keys=True) + "\n"
    Path(path).write_text(payload, encoding="utf-8")


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return ExperimentConfig.from_json_dict(payload)
