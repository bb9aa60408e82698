"""Depth expansion surgery: grouped identity-copy insertion and freeze masks.

An identity copy zeroes the two output projections (attention W_O and FFN W3),
so the copied block contributes exactly zero to both residual adds and the
stream passes through bitwise unchanged. The norm-zero copy is the negative
control: it also preserves output (zero norm scales silence both sublayers)
but its feed-forward norm scale receives an exactly-zero gradient, which is
why that initialization cannot train. The MoE variant gates the original
down-projection against a zero-initialized second one; with equal gates it
halves the FFN output, so it is deliberately not output preserving.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import BlockWeights, DecoderModel, MoEBlockExtension
from .tensor import Tensor

PLACEMENTS = ("interleaved", "prefix", "suffix")


class PlanError(ValueError):
    """Expansion parameters violate a divisibility or range constraint."""


@dataclass(frozen=True)
class ExpansionPlan:
    """Where the copies go: (insert_after_original_index, source_original_index).

    insert_after = -1 means before block 0. Sources are always the
    highest-indexed P blocks of each group, independent of placement.
    """

    original_count: int
    groups: int
    copies_per_group: int
    placement: str
    insertions: tuple[tuple[int, int], ...]

    @property
    def expanded_count(self) -> int:
        return self.original_count + self.groups * self.copies_per_group

    def to_json(self) -> str:
        doc = {
            "original_count": self.original_count,
            "groups": self.groups,
            "copies_per_group": self.copies_per_group,
            "placement": self.placement,
            "expanded_count": self.expanded_count,
            "insertions": [list(pair) for pair in self.insertions],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExpansionPlan":
        doc = json.loads(text)
        plan = cls(
            original_count=int(doc["original_count"]),
            groups=int(doc["groups"]),
            copies_per_group=int(doc["copies_per_group"]),
            placement=str(doc["placement"]),
            insertions=tuple((int(a), int(s)) for a, s in doc["insertions"]),
        )
        rebuilt = plan_expansion(plan.original_count, plan.groups,
                                 plan.copies_per_group, plan.placement)
        if rebuilt.insertions != plan.insertions:
            raise PlanError("plan file insertions do not match its parameters")
        return plan


def plan_expansion(num_blocks: int, groups: int, copies_per_group: int,
                   placement: str = "interleaved") -> ExpansionPlan:
    """Partition `num_blocks` into `groups` equal groups and schedule
    `copies_per_group` identity copies of each group's top blocks."""
    if placement not in PLACEMENTS:
        raise PlanError(f"placement must be one of {PLACEMENTS}, got {placement!r}")
    if num_blocks < 1:
        raise PlanError(f"model must have at least one block, got L={num_blocks}")
    if groups < 1:
        raise PlanError(f"groups must be >= 1, got N={groups}")
    if num_blocks % groups != 0:
        raise PlanError(f"L mod N must be 0, got L={num_blocks}, N={groups}")
    group_size = num_blocks // groups
    if not 1 <= copies_per_group <= group_size:
        raise PlanError(
            f"copies per group must satisfy 1 <= P <= L/N, got P={copies_per_group} "
            f"with group size {group_size}")

    insertions: list[tuple[int, int]] = []
    for g in range(groups):
        group_end = (g + 1) * group_size - 1
        sources = range(group_end - copies_per_group + 1, group_end + 1)
        if placement == "interleaved":
            after = group_end
        elif placement == "prefix":
            after = -1
        else:
            after = num_blocks - 1
        insertions.extend((after, s) for s in sources)
    return ExpansionPlan(num_blocks, groups, copies_per_group, placement,
                         tuple(insertions))


def make_identity_copy(src: BlockWeights) -> BlockWeights:
    """Copy of src whose output projections are zero: an exact identity block."""
    copy = src.clone()
    copy.w_o = Tensor.zeros(copy.w_o.shape)
    copy.w3 = Tensor.zeros(copy.w3.shape)
    if copy.moe is not None:
        # A gated second down-projection would leak through the FFN residual;
        # zero it as well so the copy stays an identity.
        copy.moe.w3_hat = Tensor.zeros(copy.moe.w3_hat.shape)
    return copy


def make_norm_zero_copy(src: BlockWeights) -> BlockWeights:
    """Copy of src with both norm scales zeroed (the rejected alternative init)."""
    copy = src.clone()
    copy.attn_norm = Tensor.zeros(copy.attn_norm.shape)
    copy.ffn_norm = Tensor.zeros(copy.ffn_norm.shape)
    return copy


@dataclass
class FreezeMask:
    """Trainable flag for every named parameter of one model."""

    trainable: dict[str, bool]

    def trainable_names(self) -> list[str]:
        return [n for n, t in self.trainable.items() if t]

    def frozen_names(self) -> list[str]:
        return [n for n, t in self.trainable.items() if not t]

    def validate_against(self, model) -> None:
        model_names = [n for n, _ in model.named_parameters()]
        if sorted(model_names) != sorted(self.trainable):
            missing = set(model_names) - set(self.trainable)
            extra = set(self.trainable) - set(model_names)
            raise ValueError(
                f"freeze mask does not cover the model exactly: "
                f"missing={sorted(missing)}, extra={sorted(extra)}")
        if len(model_names) != len(set(model_names)):
            raise ValueError("model has duplicate parameter names")

    @classmethod
    def all_trainable(cls, model) -> "FreezeMask":
        return cls({n: True for n, _ in model.named_parameters()})

    @classmethod
    def none_trainable(cls, model) -> "FreezeMask":
        return cls({n: False for n, _ in model.named_parameters()})


def _insert_blocks(model: DecoderModel, plan: ExpansionPlan,
                   copy_fn) -> tuple[list[BlockWeights], list[int]]:
    """Apply the plan; returns the new block list and the inserted indices."""
    new_blocks: list[BlockWeights] = []
    inserted: list[int] = []

    def push_copies(after_index: int) -> None:
        for after, src in plan.insertions:
            if after == after_index:
                inserted.append(len(new_blocks))
                new_blocks.append(copy_fn(model.blocks[src]))

    push_copies(-1)
    for i, block in enumerate(model.blocks):
        new_blocks.append(block.clone())
        push_copies(i)
    return new_blocks, inserted


def expand_model(model: DecoderModel, plan: ExpansionPlan,
                 copy_fn=make_identity_copy) -> tuple[DecoderModel, FreezeMask]:
    """Grow the model per the plan. Only inserted blocks are trainable; every
    inherited parameter (blocks, embedding, final norm, head) is frozen."""
    if plan.original_count != len(model.blocks):
        raise PlanError(
            f"plan is for {plan.original_count} blocks, model has {len(model.blocks)}")
    new_blocks, inserted = _insert_blocks(model, plan, copy_fn)
    expanded = DecoderModel(
        config=model.config.with_blocks(len(new_blocks)),
        embedding=model.embedding.copy(requires_grad=False),
        blocks=new_blocks,
        final_norm=model.final_norm.copy(requires_grad=False),
        lm_head=model.lm_head.copy(requires_grad=False),
    )
    inserted_set = set(inserted)
    trainable = {}
    for name, _ in expanded.named_parameters():
        block_idx = int(name.split(".")[1]) if name.startswith("blocks.") else None
        trainable[name] = block_idx in inserted_set
    return expanded, FreezeMask(trainable)


def moe_expand(model: DecoderModel) -> tuple[DecoderModel, FreezeMask]:
    """Give every block a zero second down-projection and an equal two-way gate.

    Trainable set is exactly the added tensors. Not output preserving at init:
    equal gates weight the original path by 0.5.
    """
    out = model.clone()
    f, d = model.config.ffn_size, model.config.hidden_size
    for b in out.blocks:
        if b.moe is not None:
            raise PlanError("model already has MoE extensions")
        b.moe = MoEBlockExtension(w3_hat=Tensor.zeros((f, d)), gate=Tensor.zeros((2,)))
    trainable = {name: name.endswith(("moe_w3_hat", "moe_gate"))
                 for name, _ in out.named_parameters()}
    return out, FreezeMask(trainable)


@dataclass(frozen=True)
class PreservationReport:
    trials: int
    seq_len: int
    max_abs_diff: float

    @property
    def exact(self) -> bool:
        return self.max_abs_diff == 0.0


def verify_preservation(base: DecoderModel, expanded: DecoderModel,
                        trials: int = 20, seq_len: int = 16,
                        seed: int = 0) -> PreservationReport:
    """Max absolute logit difference over random token sequences."""
    if base.config.vocab_size != expanded.config.vocab_size:
        raise PlanError("models do not share a vocabulary")
    rng = np.random.default_rng(seed)
    n_max = min(base.config.max_seq_len, expanded.config.max_seq_len)
    length = min(seq_len, n_max)
    worst = 0.0
    with T.no_grad():
        for _ in range(trials):
            ids = rng.integers(0, base.config.vocab_size, size=length)
            a = base.forward(ids).data.astype(np.float64)
            b = expanded.forward(ids).data.astype(np.float64)
            worst = max(worst, float(np.abs(a - b).max()))
    return PreservationReport(trials=trials, seq_len=length, max_abs_diff=worst)


def save_plan(plan: ExpansionPlan, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(plan.to_json(), encoding="utf-8")
    return path


def load_plan(path: str | Path) -> ExpansionPlan:
    return ExpansionPlan.from_json(Path(path).read_text(encoding="utf-8"))
