"""Shared test fixtures: the finite-difference harness and tiny models.

The FD harness perturbs every input coordinate by +-step and compares the
central difference against the reverse-mode gradient. Losses are built as
weighted sums with O(1) weights so gradients sit well above float32 forward
noise; the atol floor absorbs what remains.
"""

from __future__ import annotations

import numpy as np

from blockgrow import tensor as T
from blockgrow.data import VOCAB_SIZE, derive_rng
from blockgrow.model import ModelConfig, init_model
from blockgrow.tensor import Tensor

FD_STEP = 1e-3
FD_RTOL = 1e-3
FD_ATOL = 5e-4


def fd_check(build, tensors, step=FD_STEP, rtol=FD_RTOL, atol=FD_ATOL):
    """Assert reverse-mode gradients match central finite differences.

    `build(*tensors)` must return a 0-d loss tensor and be re-runnable.
    """
    for t in tensors:
        t.requires_grad = True
    loss = build(*tensors)
    assert loss.ndim == 0, "fd_check needs a scalar loss"
    grads = T.backward(loss)
    for t in tensors:
        g = grads.get(t)
        analytic = (np.zeros(t.shape, np.float64) if g is None
                    else g.data.astype(np.float64))
        flat = t.data.reshape(-1)
        numeric = np.zeros(flat.size, np.float64)
        for i in range(flat.size):
            orig = float(flat[i])
            flat[i] = orig + step
            up = float(build(*tensors).data)
            flat[i] = orig - step
            down = float(build(*tensors).data)
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * step)
        np.testing.assert_allclose(
            analytic, numeric.reshape(t.shape), rtol=rtol, atol=atol,
            err_msg=f"gradient mismatch on tensor of shape {t.shape}")


def _weight_like(rng, shape) -> Tensor:
    signs = rng.choice([-1.0, 1.0], size=shape)
    return Tensor((signs * rng.uniform(0.5, 1.5, size=shape)).astype(np.float32))


def _t(rng, shape, lo=-2.0, hi=2.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape).astype(np.float32))


def generate_fd_cases(seeds_per_op: int = 10):
    """(label, tensors, build) triples covering every differentiable op."""
    cases = []

    def emit(name, seed, tensors, build):
        cases.append((f"{name}-{seed}", tensors, build))

    for k in range(seeds_per_op):
        rng = np.random.default_rng(1000 + k)

        a, b, w = _t(rng, (3, 4)), _t(rng, (3, 4)), _weight_like(rng, (3, 4))
        emit("add", k, [a, b], lambda a, b, w=w: T.tsum(T.mul(T.add(a, b), w)))

        a, b, w = _t(rng, (3, 4)), _t(rng, (3, 4)), _weight_like(rng, (3, 4))
        emit("mul", k, [a, b], lambda a, b, w=w: T.tsum(T.mul(T.mul(a, b), w)))

        a, w = _t(rng, (3, 4)), _weight_like(rng, (3, 4))
        emit("scale", k, [a], lambda a, w=w: T.tsum(T.mul(T.scale(a, 0.7), w)))

        a, w = _t(rng, (3, 4)), _weight_like(rng, (3, 4))
        const = rng.uniform(-1, 1, size=(3, 4)).astype(np.float32)
        emit("add_const", k, [a],
             lambda a, w=w, c=const: T.tsum(T.mul(T.add_const(a, c), w)))

        a, w = _t(rng, (3, 4)), _weight_like(rng, (3, 4))
        s = Tensor(np.asarray(rng.uniform(0.3, 1.5), dtype=np.float32))
        emit("scale_by", k, [a, s],
             lambda a, s, w=w: T.tsum(T.mul(T.scale_by(a, s), w)))

        v = _t(rng, (6,))
        emit("index", k, [v], lambda v, i=int(rng.integers(0, 6)): T.index(v, i))

        a, b = _t(rng, (2, 3, 4), -1, 1), _t(rng, (4, 2), -1, 1)
        w = _weight_like(rng, (2, 3, 2))
        emit("matmul_shared", k, [a, b],
             lambda a, b, w=w: T.tsum(T.mul(T.matmul(a, b), w)))

        a, b = _t(rng, (2, 3, 4), -1, 1), _t(rng, (2, 4, 2), -1, 1)
        w = _weight_like(rng, (2, 3, 2))
        emit("matmul_batched", k, [a, b],
             lambda a, b, w=w: T.tsum(T.mul(T.matmul(a, b), w)))

        a, w = _t(rng, (3, 4)), _weight_like(rng, (4, 3))
        emit("transpose", k, [a],
             lambda a, w=w: T.tsum(T.mul(T.transpose(a), w)))

        a, w = _t(rng, (2, 6)), _weight_like(rng, (3, 4))
        emit("reshape", k, [a],
             lambda a, w=w: T.tsum(T.mul(T.reshape(a, (3, 4)), w)))

        a, w = _t(rng, (2, 6)), _weight_like(rng, (2, 3))
        emit("slice_last", k, [a],
             lambda a, w=w: T.tsum(T.mul(T.slice_last(a, 1, 4), w)))

        p1, p2 = _t(rng, (2, 2)), _t(rng, (2, 3))
        w = _weight_like(rng, (2, 5))
        emit("concat_last", k, [p1, p2],
             lambda p1, p2, w=w: T.tsum(T.mul(T.concat_last([p1, p2]), w)))

        a, w = _t(rng, (3, 5)), _weight_like(rng, (3, 5))
        emit("softmax", k, [a],
             lambda a, w=w: T.tsum(T.mul(T.softmax(a), w)))

        a, w = _t(rng, (3, 4), -3, 3), _weight_like(rng, (3, 4))
        emit("silu", k, [a], lambda a, w=w: T.tsum(T.mul(T.silu(a), w)))

        x, sc = _t(rng, (2, 3, 4)), _t(rng, (4,), 0.5, 1.5)
        w = _weight_like(rng, (2, 3, 4))
        emit("rms_norm", k, [x, sc],
             lambda x, sc, w=w: T.tsum(T.mul(T.rms_norm(x, sc), w)))

        a, w = _t(rng, (3, 4)), _weight_like(rng, (3, 4))
        ang = rng.uniform(0, 2 * np.pi, size=(3, 2))
        cos, sin = np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)
        emit("rotary", k, [a],
             lambda a, c=cos, s=sin, w=w: T.tsum(T.mul(T.rotary(a, c, s), w)))

        table = _t(rng, (7, 3))
        ids = rng.integers(0, 7, size=(2, 3))
        w = _weight_like(rng, (2, 3, 3))
        emit("embedding", k, [table],
             lambda table, i=ids, w=w: T.tsum(T.mul(T.embedding(table, i), w)))

        logits = _t(rng, (2, 3, 5))
        targets = rng.integers(0, 5, size=(2, 3))
        emit("cross_entropy", k, [logits],
             lambda logits, t=targets: T.cross_entropy(logits, t))

        a = _t(rng, (3, 4))
        emit("tsum", k, [a], lambda a: T.tsum(a))

        x = _t(rng, (2, 3), -1, 1)
        w1, w2 = _t(rng, (3, 4), -0.7, 0.7), _t(rng, (3, 4), -0.7, 0.7)
        w3 = _t(rng, (4, 3), -0.7, 0.7)
        ww = _weight_like(rng, (2, 3))
        emit("swiglu_chain", k, [x, w1, w2, w3],
             lambda x, w1, w2, w3, w=ww: T.tsum(T.mul(
                 T.matmul(T.mul(T.silu(T.matmul(x, w1)), T.matmul(x, w2)), w3), w)))
    return cases


def _silu64(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = z[pos] / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = z[~pos] * e / (1.0 + e)
    return out


def _softmax64(rows: np.ndarray) -> np.ndarray:
    shifted = rows - rows.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def reference_forward_f64(model, ids, targets=None):
    """Independent float64 forward (and mean NLL) for a plain decoder.

    Reads the live float32 weights, so in-place parameter perturbations are
    visible; every step is recomputed here in float64 with no tape. Used as
    the recomposition oracle and as the low-noise loss for FD checks.
    """
    cfg = model.config
    ids = np.asarray(ids)
    n = ids.shape[-1]
    hs = cfg.head_size
    pos = np.arange(n, dtype=np.float64)[:, None]
    idx = np.arange(0, hs, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, idx / hs)
    cos, sin = np.cos(angles), np.sin(angles)
    mask = np.triu(np.full((n, n), -1e9, dtype=np.float64), k=1)
    eps = float(cfg.norm_eps)

    def rms(v, w):
        r = np.sqrt((v * v).mean(axis=-1, keepdims=True) + eps)
        return (v / r) * w.data.astype(np.float64)

    def rope(m):
        out = np.empty_like(m)
        ev, od = m[:, 0::2], m[:, 1::2]
        out[:, 0::2] = ev * cos - od * sin
        out[:, 1::2] = ev * sin + od * cos
        return out

    x = model.embedding.data.astype(np.float64)[ids]
    for blk in model.blocks:
        assert blk.moe is None, "reference oracle covers plain blocks only"
        h = rms(x, blk.attn_norm)
        q = h @ blk.w_q.data.astype(np.float64)
        k = h @ blk.w_k.data.astype(np.float64)
        v = h @ blk.w_v.data.astype(np.float64)
        heads = []
        for i in range(cfg.num_heads):
            sl = slice(i * hs, (i + 1) * hs)
            qi, ki = rope(q[:, sl]), rope(k[:, sl])
            scores = qi @ ki.T / np.sqrt(float(hs)) + mask
            heads.append(_softmax64(scores) @ v[:, sl])
        x = x + np.concatenate(heads, axis=-1) @ blk.w_o.data.astype(np.float64)
        h2 = rms(x, blk.ffn_norm)
        ff = (_silu64(h2 @ blk.w1.data.astype(np.float64))
              * (h2 @ blk.w2.data.astype(np.float64)))
        x = x + ff @ blk.w3.data.astype(np.float64)
    x = rms(x, model.final_norm)
    logits = x @ model.lm_head.data.astype(np.float64)
    if targets is None:
        return logits
    targets = np.asarray(targets)
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(n), targets]
    return float(nll.mean())


def tiny_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=VOCAB_SIZE, hidden_size=16, num_heads=2,
                ffn_size=32, num_blocks=4, max_seq_len=16)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed: int = 0, **overrides):
    return init_model(tiny_config(**overrides), derive_rng(seed, "init"))


def params_snapshot(model) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters()}
