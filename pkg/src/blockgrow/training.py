"""Continued pretraining with freeze masks, plus the comparison strategies.

Four ways to adapt a base model: grow it with identity blocks and train only
those (block_expand), train everything (full_ft), train low-rank adapters on
frozen matrices (lora), or train gated second down-projections (moe). All
share one loop: AdamW with decoupled decay on matrices only, linear warmup
into cosine decay, and global-norm gradient clipping. Parameters absent from
a step's Grad are never touched, which is the whole freeze mechanism.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import derive_rng
from .expansion import FreezeMask, expand_model, moe_expand, plan_expansion
from .model import BlockWeights, DecoderModel, ModelConfig, decoder_forward
from .tensor import Grad, Tensor

STRATEGIES = ("block_expand", "full_ft", "lora", "moe")
LORA_TARGETS_DEFAULT = ("w_q", "w_k", "w_v", "w_o", "w1", "w2", "w3")


class TrainingDivergedError(RuntimeError):
    """Loss or gradients became non-finite; carries the failing step index."""

    def __init__(self, step: int, message: str = ""):
        super().__init__(message or f"training diverged at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    batch_size: int
    seq_len: int
    max_lr: float = 2e-4
    warmup_ratio: float = 0.06
    adam_betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip_norm: float = 1.0
    strategy: str = "block_expand"
    lora_rank: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("batch_size and seq_len must be >= 1")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.max_lr <= 0:
            raise ValueError("max_lr must be > 0")
        b1, b2 = self.adam_betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError("adam betas must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be > 0")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.lora_rank is not None and self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> max_lr over the warmup span, then cosine to 0."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.total_steps == 0:
        return 0.0
    warmup = round(cfg.warmup_ratio * cfg.total_steps)
    if warmup > 0 and step <= warmup:
        return cfg.max_lr * (step / warmup)
    if step >= cfg.total_steps:
        return 0.0
    frac = (step - warmup) / (cfg.total_steps - warmup)
    return cfg.max_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_gradients(grads: Grad, max_norm: float) -> Grad:
    """Scale all entries by max_norm/norm when the global L2 norm exceeds it.

    Under the cap the same Grad object passes through, bitwise untouched.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    norm = grads.global_norm()
    if norm <= max_norm:
        return grads
    return grads.scaled(max_norm / norm)


class AdamW:
    """Adam with decoupled weight decay on matrices (rank >= 2) only.

    Norm scales and gate logits are rank-1 and stay decay-exempt. Moment
    state is keyed by parameter identity; parameters absent from a step's
    gradient are not stepped and their state does not advance.
    """

    def __init__(self, params: list[tuple[str, Tensor]], cfg: TrainConfig):
        self.params = list(params)
        self.betas = cfg.adam_betas
        self.eps = cfg.adam_eps
        self.weight_decay = cfg.weight_decay
        self.moments: dict[int, tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self, grads: Grad, lr: float) -> None:
        b1, b2 = self.betas
        for name, p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            if g.shape != p.shape:
                raise T.ShapeError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name} of shape {p.shape}")
            m, v, t = self.moments.get(id(p), (None, None, 0))
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            t += 1
            gd = g.data
            m = b1 * m + (1.0 - b1) * gd
            v = b2 * v + (1.0 - b2) * (gd * gd)
            self.moments[id(p)] = (m, v, t)
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            update = lr * (m_hat / (np.sqrt(v_hat) + self.eps))
            if self.weight_decay > 0 and p.ndim >= 2:
                update = update + (lr * self.weight_decay) * p.data
            np.subtract(p.data, update.astype(np.float32), out=p.data)


@dataclass
class TrainResult:
    loss_history: list[float]
    lr_history: list[float]
    grad_norm_history: list[float]
    wall_time_s: float
    steps: int


def train(model, mask: FreezeMask, stream, cfg: TrainConfig, *,
          csv_path: str | Path | None = None,
          checkpoint_every: int | None = None,
          checkpoint_base: str | Path | None = None) -> TrainResult:
    """Run cfg.total_steps optimizer steps over (tokens, targets) batches.

    Only mask-trainable parameters receive gradients or updates; frozen
    tensors are bitwise invariant for the whole run. Emits an optional
    per-step CSV (step, lr, loss, grad_norm) and optional periodic
    checkpoints. Raises TrainingDivergedError on a non-finite loss.
    """
    mask.validate_against(model)
    named = model.named_parameters()
    for name, p in named:
        p.requires_grad = mask.trainable[name]
    trainable = [(n, p) for n, p in named if mask.trainable[n]]
    opt = AdamW(trainable, cfg)

    losses: list[float] = []
    lrs: list[float] = []
    norms: list[float] = []
    writer = None
    handle = None
    if csv_path is not None:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        handle = open(csv_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(handle)
        writer.writerow(["step", "lr", "loss", "grad_norm"])

    start = time.perf_counter()
    try:
        for step in range(cfg.total_steps):
            tokens, targets = next(stream)
            try:
                logits = model.forward_batch(tokens)
                loss = T.cross_entropy(logits, targets)
                grads = T.backward(loss)
            except T.NonFiniteError as exc:
                raise TrainingDivergedError(step, f"step {step}: {exc}") from exc
            loss_value = float(loss.data)
            grad_norm = grads.global_norm()
            if not (math.isfinite(loss_value) and math.isfinite(grad_norm)):
                raise TrainingDivergedError(step)
            lr = lr_at(step, cfg)
            opt.step(clip_gradients(grads, cfg.grad_clip_norm), lr)
            losses.append(loss_value)
            lrs.append(lr)
            norms.append(grad_norm)
            if writer is not None:
                writer.writerow([step, repr(lr), repr(loss_value), repr(grad_norm)])
            if (checkpoint_every and checkpoint_base
                    and (step + 1) % checkpoint_every == 0):
                from . import artifacts
                artifacts.save_checkpoint(
                    f"{checkpoint_base}.step{step + 1:06d}", model, mask)
    finally:
        if handle is not None:
            handle.close()
    wall = time.perf_counter() - start
    return TrainResult(losses, lrs, norms, wall, cfg.total_steps)


# ---------------------------------------------------------------------------
# low-rank adapters


@dataclass
class LoraAdapter:
    a: Tensor  # (in, r)
    b: Tensor  # (r, out), zero at attach time so the start point is the base

    @property
    def rank(self) -> int:
        return self.a.shape[1]


class LoraModel:
    """Base decoder plus low-rank deltas; effective weight is W + A @ B.

    The deltas are materialized on the tape each forward, so gradients reach
    only A and B while the base stays frozen and bitwise intact.
    """

    def __init__(self, base: DecoderModel, adapters: dict[tuple[int, str], LoraAdapter],
                 rank: int, targets: tuple[str, ...]):
        self.base = base
        self.adapters = adapters
        self.rank = rank
        self.targets = tuple(targets)

    @property
    def config(self) -> ModelConfig:
        return self.base.config

    def _effective_blocks(self) -> list[BlockWeights]:
        blocks = []
        for i, blk in enumerate(self.base.blocks):
            fields = {name: getattr(blk, name) for name in BlockWeights.FIELDS}
            for target in self.targets:
                ad = self.adapters[(i, target)]
                fields[target] = T.add(fields[target], T.matmul(ad.a, ad.b))
            blocks.append(BlockWeights(**fields, moe=blk.moe))
        return blocks

    def forward_batch(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise T.ShapeError(f"forward_batch: (batch, n) ids expected, got {ids.shape}")
        return decoder_forward(self.config, self.base.embedding,
                               self._effective_blocks(), self.base.final_norm,
                               self.base.lm_head, ids)

    def forward(self, ids) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim != 1:
            raise T.ShapeError(f"forward: 1-D ids expected, got shape {ids.shape}")
        out = self.forward_batch(ids[None, :])
        return T.reshape(out, out.shape[1:])

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = self.base.named_parameters()
        for i in range(len(self.base.blocks)):
            for target in self.targets:
                ad = self.adapters[(i, target)]
                params.append((f"blocks.{i}.lora.{target}.a", ad.a))
                params.append((f"blocks.{i}.lora.{target}.b", ad.b))
        return params

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


def attach_lora(model: DecoderModel, rank: int,
                targets: tuple[str, ...] = LORA_TARGETS_DEFAULT,
                seed: int = 0) -> tuple[LoraModel, FreezeMask]:
    """Wrap a (cloned) base with rank-r adapters on the chosen block matrices.

    B starts at zero, so the first forward is bitwise the base model's.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    bad = [t for t in targets if t not in BlockWeights.MATRIX_FIELDS]
    if bad:
        raise ValueError(f"unknown adapter targets: {bad}")
    base = model.clone()
    adapters: dict[tuple[int, str], LoraAdapter] = {}
    for i, blk in enumerate(base.blocks):
        for target in targets:
            w = getattr(blk, target)
            fan_in, fan_out = w.shape
            rng = derive_rng(seed, "lora", str(i), target)
            bound = 1.0 / math.sqrt(fan_in)
            a = Tensor(rng.uniform(-bound, bound, size=(fan_in, rank)).astype(np.float32))
            b = Tensor.zeros((rank, fan_out))
            adapters[(i, target)] = LoraAdapter(a, b)
    wrapped = LoraModel(base, adapters, rank, tuple(targets))
    trainable = {name: ".lora." in name for name, _ in wrapped.named_parameters()}
    return wrapped, FreezeMask(trainable)


def block_parameter_count(config: ModelConfig) -> int:
    d, f = config.hidden_size, config.ffn_size
    return 4 * d * d + 2 * d + 2 * d * f + f * d


def lora_parameter_count(config: ModelConfig, rank: int,
                         targets: tuple[str, ...] = LORA_TARGETS_DEFAULT) -> int:
    d, f = config.hidden_size, config.ffn_size
    shapes = {"w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
              "w1": (d, f), "w2": (d, f), "w3": (f, d)}
    per_block = sum(rank * (shapes[t][0] + shapes[t][1]) for t in targets)
    return per_block * config.num_blocks


def matched_lora_rank(config: ModelConfig, added_blocks: int,
                      targets: tuple[str, ...] = LORA_TARGETS_DEFAULT) -> int:
    """Rank whose adapter count best matches `added_blocks` full blocks."""
    target_count = added_blocks * block_parameter_count(config)
    per_rank = lora_parameter_count(config, 1, targets)
    return max(1, round(target_count / per_rank))


# ---------------------------------------------------------------------------
# strategy preparation


@dataclass(frozen=True)
class StrategySpec:
    """One comparison arm: what to do to the base before training."""

    kind: str
    added_blocks: int = 2
    placement: str = "interleaved"
    lora_rank: int | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"kind must be one of {STRATEGIES}")
        if self.added_blocks < 1:
            raise ValueError("added_blocks must be >= 1")

    @property
    def label(self) -> str:
        if self.kind == "block_expand":
            suffix = f"_{self.added_blocks}"
            if self.placement != "interleaved":
                suffix += f"_{self.placement}"
            return f"block_expand{suffix}"
        if self.kind == "lora":
            return f"lora_r{self.lora_rank}" if self.lora_rank else "lora"
        return self.kind


def prepare_strategy(base: DecoderModel, spec: StrategySpec,
                     cfg: TrainConfig):
    """Build the trainee for one strategy; the base model is never mutated.

    Returns (model, mask). block_expand adds `added_blocks` identity copies
    via an (N=added_blocks, P=1) plan; lora defaults its rank to the count
    matched against that same number of added blocks.
    """
    if spec.kind == "block_expand":
        plan = plan_expansion(len(base.blocks), spec.added_blocks, 1, spec.placement)
        return expand_model(base, plan)
    if spec.kind == "full_ft":
        trainee = base.clone()
        return trainee, FreezeMask.all_trainable(trainee)
    if spec.kind == "lora":
        rank = spec.lora_rank or cfg.lora_rank or matched_lora_rank(
            base.config, spec.added_blocks)
        return attach_lora(base, rank, seed=cfg.seed)
    if spec.kind == "moe":
        return moe_expand(base)
    raise ValueError(f"unknown strategy kind {spec.kind!r}")
