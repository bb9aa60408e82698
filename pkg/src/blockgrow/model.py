"""A compact pre-norm decoder: RMSNorm, rotary multi-head attention, SwiGLU.

Every sublayer is residual (x + f(norm(x))) and every projection is bias-free,
which is what makes zero-initialized output projections act as exact identity
blocks: the sublayer contribution is an all-zero matrix product and the
residual stream passes through bitwise unchanged.

Forward functions accept activations of shape (n, d) or (batch, n, d); the ops
underneath are shape-agnostic over leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_size: int
    num_heads: int
    ffn_size: int
    num_blocks: int
    max_seq_len: int
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if self.hidden_size < 1 or self.num_heads < 1 or self.ffn_size < 1:
            raise ValueError("hidden_size, num_heads and ffn_size must be positive")
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be >= 0")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be positive")
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if (self.hidden_size // self.num_heads) % 2 != 0:
            raise ValueError("head size must be even for rotary pairs")

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads

    def with_blocks(self, num_blocks: int) -> "ModelConfig":
        return ModelConfig(self.vocab_size, self.hidden_size, self.num_heads,
                           self.ffn_size, num_blocks, self.max_seq_len, self.norm_eps)


@dataclass
class MoEBlockExtension:
    """Second FFN down-projection plus a 2-way gate over (original, added)."""

    w3_hat: Tensor  # (ffn_size, hidden_size), zero at construction
    gate: Tensor    # (2,) logits, zero at construction


@dataclass
class BlockWeights:
    """One decoder block. Attention projections are fused d x d per role and
    split into heads along the feature axis at use time."""

    attn_norm: Tensor  # (d,)
    w_q: Tensor        # (d, d)
    w_k: Tensor        # (d, d)
    w_v: Tensor        # (d, d)
    w_o: Tensor        # (d, d)
    ffn_norm: Tensor   # (d,)
    w1: Tensor         # (d, f)  SwiGLU gate-side
    w2: Tensor         # (d, f)  SwiGLU linear-side
    w3: Tensor         # (f, d)  down-projection
    moe: MoEBlockExtension | None = None

    MATRIX_FIELDS = ("w_q", "w_k", "w_v", "w_o", "w1", "w2", "w3")
    FIELDS = ("attn_norm", "w_q", "w_k", "w_v", "w_o", "ffn_norm", "w1", "w2", "w3")

    def clone(self) -> "BlockWeights":
        kw = {name: getattr(self, name).copy(requires_grad=False) for name in self.FIELDS}
        moe = None
        if self.moe is not None:
            moe = MoEBlockExtension(self.moe.w3_hat.copy(requires_grad=False),
                                    self.moe.gate.copy(requires_grad=False))
        return BlockWeights(**kw, moe=moe)


# Rotary tables and causal masks depend only on (positions, head size) and
# (sequence length); the default arange-positions case is cached.
_ROPE_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
_MASK_CACHE: dict[int, np.ndarray] = {}

MASK_VALUE = -1e9  # additive "minus infinity"; exp underflows to exactly 0


def rope_tables(positions: np.ndarray, head_size: int) -> tuple[np.ndarray, np.ndarray]:
    half = head_size // 2
    inv_freq = (10000.0 ** (-np.arange(half, dtype=np.float64) * 2.0 / head_size))
    angles = np.outer(np.asarray(positions, dtype=np.float64), inv_freq)
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def _default_rope(n: int, head_size: int) -> tuple[np.ndarray, np.ndarray]:
    key = (n, head_size)
    if key not in _ROPE_CACHE:
        _ROPE_CACHE[key] = rope_tables(np.arange(n), head_size)
    return _ROPE_CACHE[key]


def causal_mask(n: int) -> np.ndarray:
    if n not in _MASK_CACHE:
        _MASK_CACHE[n] = np.triu(np.full((n, n), MASK_VALUE, dtype=np.float32), k=1)
    return _MASK_CACHE[n]


def mhsa(x: Tensor, b: BlockWeights, config: ModelConfig,
         positions: np.ndarray | None = None) -> Tensor:
    """Causal multi-head self-attention over an already-normalized input.

    Rotary embedding is applied to the query and key of every head; the causal
    structure is an additive mask on the pre-softmax scores.
    """
    n = x.shape[-2]
    hs = config.head_size
    if positions is None:
        cos, sin = _default_rope(n, hs)
    else:
        if len(positions) != n:
            raise T.ShapeError(f"mhsa: {len(positions)} positions for {n} rows")
        cos, sin = rope_tables(positions, hs)
    mask = causal_mask(n)

    q = T.matmul(x, b.w_q)
    k = T.matmul(x, b.w_k)
    v = T.matmul(x, b.w_v)
    heads = []
    for i in range(config.num_heads):
        lo, hi = i * hs, (i + 1) * hs
        qi = T.rotary(T.slice_last(q, lo, hi), cos, sin)
        ki = T.rotary(T.slice_last(k, lo, hi), cos, sin)
        vi = T.slice_last(v, lo, hi)
        scores = T.scale(T.matmul(qi, T.transpose(ki)), 1.0 / np.sqrt(hs))
        att = T.softmax(T.add_const(scores, mask), axis=-1)
        heads.append(T.matmul(att, vi))
    return T.matmul(T.concat_last(heads), b.w_o)


def swiglu_ffn(x: Tensor, b: BlockWeights) -> Tensor:
    """(SiLU(x W1) ⊗ x W2) W3, with the optional gated second down-projection."""
    core = T.mul(T.silu(T.matmul(x, b.w1)), T.matmul(x, b.w2))
    if b.moe is None:
        return T.matmul(core, b.w3)
    gates = T.softmax(b.moe.gate, axis=-1)
    original = T.scale_by(T.matmul(core, b.w3), T.index(gates, 0))
    added = T.scale_by(T.matmul(core, b.moe.w3_hat), T.index(gates, 1))
    return T.add(original, added)


def block_forward(x: Tensor, b: BlockWeights, config: ModelConfig,
                  positions: np.ndarray | None = None) -> Tensor:
    h = T.add(x, mhsa(T.rms_norm(x, b.attn_norm, config.norm_eps), b, config, positions))
    return T.add(h, swiglu_ffn(T.rms_norm(h, b.ffn_norm, config.norm_eps), b))


def decoder_forward(config: ModelConfig, emb: Tensor, blocks: list[BlockWeights],
                    final_norm: Tensor, lm_head: Tensor, ids: np.ndarray) -> Tensor:
    """Shared forward over an explicit block list; ids shape (batch, n)."""
    ids = np.asarray(ids)
    n = ids.shape[-1]
    if n < 1:
        raise T.ShapeError("forward: empty sequence")
    if n > config.max_seq_len:
        raise T.ShapeError(f"forward: sequence length {n} exceeds max {config.max_seq_len}")
    x = T.embedding(emb, ids)
    for b in blocks:
        x = block_forward(x, b, config)
    x = T.rms_norm(x, final_norm, config.norm_eps)
    return T.matmul(x, lm_head)


@dataclass
class DecoderModel:
    config: ModelConfig
    embedding: Tensor            # (V, d)
    blocks: list[BlockWeights]
    final_norm: Tensor           # (d,)
    lm_head: Tensor              # (d, V)

    def forward_batch(self, ids: np.ndarray) -> Tensor:
        """ids (batch, n) -> logits (batch, n, vocab)."""
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise T.ShapeError(f"forward_batch: (batch, n) ids expected, got {ids.shape}")
        return decoder_forward(self.config, self.embedding, self.blocks,
                               self.final_norm, self.lm_head, ids)

    def forward(self, ids) -> Tensor:
        """ids (n,) -> logits (n, vocab)."""
        ids = np.asarray(ids)
        if ids.ndim != 1:
            raise T.ShapeError(f"forward: 1-D ids expected, got shape {ids.shape}")
        out = self.forward_batch(ids[None, :])
        return T.reshape(out, out.shape[1:])

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params: list[tuple[str, Tensor]] = [("embedding", self.embedding)]
        for i, b in enumerate(self.blocks):
            for name in BlockWeights.FIELDS:
                params.append((f"blocks.{i}.{name}", getattr(b, name)))
            if b.moe is not None:
                params.append((f"blocks.{i}.moe_w3_hat", b.moe.w3_hat))
                params.append((f"blocks.{i}.moe_gate", b.moe.gate))
        params.append(("final_norm", self.final_norm))
        params.append(("lm_head", self.lm_head))
        return params

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def clone(self) -> "DecoderModel":
        return DecoderModel(
            config=self.config,
            embedding=self.embedding.copy(requires_grad=False),
            blocks=[b.clone() for b in self.blocks],
            final_norm=self.final_norm.copy(requires_grad=False),
            lm_head=self.lm_head.copy(requires_grad=False),
        )


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32))


def init_block(config: ModelConfig, rng: np.random.Generator) -> BlockWeights:
    d, f = config.hidden_size, config.ffn_size
    return BlockWeights(
        attn_norm=Tensor.ones((d,)),
        w_q=_uniform(rng, (d, d), d),
        w_k=_uniform(rng, (d, d), d),
        w_v=_uniform(rng, (d, d), d),
        w_o=_uniform(rng, (d, d), d),
        ffn_norm=Tensor.ones((d,)),
        w1=_uniform(rng, (d, f), d),
        w2=_uniform(rng, (d, f), d),
        w3=_uniform(rng, (f, d), f),
    )


def init_model(config: ModelConfig, rng: np.random.Generator) -> DecoderModel:
    """Scaled-uniform init (bound 1/sqrt(fan_in)); norm scales start at one."""
    d, v = config.hidden_size, config.vocab_size
    return DecoderModel(
        config=config,
        embedding=_uniform(rng, (v, d), d),
        blocks=[init_block(config, rng) for _ in range(config.num_blocks)],
        final_norm=Tensor.ones((d,)),
        lm_head=_uniform(rng, (d, v), d),
    )
