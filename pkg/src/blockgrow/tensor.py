"""Dense float32 tensors with reverse-mode autodiff.

Every op records its inputs and a backward closure on the result tensor; the
resulting graph is a per-forward-pass tape that is discarded with the step.
Gradients are accumulated in a fixed (reverse construction) order so repeated
backward passes over identical graphs are bitwise reproducible.

Only the access patterns the decoder needs are supported: matrices and stacks
of matrices, matmul with a shared 2-D right operand or matching leading axes,
elementwise ops on identical shapes, and reductions over the last axis.
"""

from __future__ import annotations

from collections.abc import Iterator, Mapping
from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Suspend tape recording; forwards inside evaluate values only."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Operands have shapes the op does not accept."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf; raised at the op, not discovered later."""


def _as_f32(data) -> np.ndarray:
    # ascontiguousarray would promote 0-d to 1-d; keep scalars 0-d
    arr = np.asarray(data, dtype=np.float32)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def _require_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


class Tensor:
    """Immutable-by-convention float32 array plus tape bookkeeping.

    `data` is a contiguous row-major float32 buffer. Tensors created by ops
    carry `_parents` and a `_grad_fn` mapping the output gradient to parent
    gradients; leaf tensors carry neither. Identity (not value) is what names
    a parameter, so Tensor is hashable by object id and defines no __eq__.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = _as_f32(data)
        _require_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.ndim != 0:
            raise ShapeError(f"item: scalar required, got shape {self.shape}")
        return float(self.data)

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape, dtype=np.float32), requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape, dtype=np.float32), requires_grad)

    def copy(self, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), rg)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def sum(self) -> "Tensor":
        return tsum(self)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    _require_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        # Dead branches of the graph carry no tape, so frozen prefixes of a
        # model cost nothing in backward.
        out._parents = ()
        out._grad_fn = None
    return out


class Grad(Mapping):
    """Gradient of a scalar loss: parameter identity -> Tensor of same shape.

    Parameters that are frozen or unreachable from the loss are simply absent;
    absence means zero.
    """

    def __init__(self, entries: dict[Tensor, Tensor]):
        self._entries = entries

    def __getitem__(self, param: Tensor) -> Tensor:
        return self._entries[param]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, param: Tensor, default=None):
        return self._entries.get(param, default)

    def global_norm(self) -> float:
        """L2 norm over the concatenation of all entries, float64 accumulate."""
        total = 0.0
        for g in self._entries.values():
            total += float(np.dot(g.data.ravel().astype(np.float64),
                                  g.data.ravel().astype(np.float64)))
        return float(np.sqrt(total))

    def scaled(self, factor: float) -> "Grad":
        f = np.float32(factor)
        return Grad({p: Tensor(g.data * f) for p, g in self._entries.items()})


# ---------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data

    def grad_fn(g: np.ndarray):
        return g, g

    return _make(out, "add", (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = a.data * b.data

    def grad_fn(g: np.ndarray):
        return g * b.data, g * a.data

    return _make(out, "mul", (a, b), grad_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a Python constant (no gradient into the constant)."""
    f = np.float32(factor)
    out = a.data * f

    def grad_fn(g: np.ndarray):
        return (g * f,)

    return _make(out, "scale", (a,), grad_fn)


def add_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Add a constant array broadcastable to a's shape (e.g. a causal mask)."""
    const = np.asarray(const, dtype=np.float32)
    out = a.data + const
    if out.shape != a.shape:
        raise ShapeError(f"add_const: {const.shape} does not broadcast into {a.shape}")

    def grad_fn(g: np.ndarray):
        return (g,)

    return _make(out, "add_const", (a,), grad_fn)


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a scalar tensor (0-d), e.g. a gate weight."""
    if s.ndim != 0:
        raise ShapeError(f"scale_by: scalar expected, got shape {s.shape}")
    out = a.data * s.data

    def grad_fn(g: np.ndarray):
        ga = g * s.data
        gs = np.asarray((g.astype(np.float64) * a.data).sum(), dtype=np.float32)
        return ga, gs

    return _make(out, "scale_by", (a, s), grad_fn)


def index(a: Tensor, i: int) -> Tensor:
    """Pick one element of a 1-D tensor as a 0-d tensor."""
    if a.ndim != 1:
        raise ShapeError(f"index: 1-D tensor expected, got shape {a.shape}")
    out = np.asarray(a.data[i], dtype=np.float32)

    def grad_fn(g: np.ndarray):
        ga = np.zeros_like(a.data)
        ga[i] = g
        return (ga,)

    return _make(out, "index", (a,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: (..., m, k) @ (k, n) or (..., m, k) @ (..., k, n)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: rank >= 2 operands required, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading extents differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g: np.ndarray):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            k = a.shape[-1]
            n = g.shape[-1]
            gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, "matmul", (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose: rank >= 2 required, got {a.shape}")
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))

    def grad_fn(g: np.ndarray):
        return (np.ascontiguousarray(np.swapaxes(g, -1, -2)),)

    return _make(out, "transpose", (a,), grad_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def grad_fn(g: np.ndarray):
        return (g.reshape(a.shape),)

    return _make(out, "reshape", (a,), grad_fn)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the last axis."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"slice_last: [{start}:{stop}] out of range for {a.shape}")
    out = np.ascontiguousarray(a.data[..., start:stop])

    def grad_fn(g: np.ndarray):
        ga = np.zeros_like(a.data)
        ga[..., start:stop] = g
        return (ga,)

    return _make(out, "slice_last", (a,), grad_fn)


def concat_last(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_last: empty part list")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError("concat_last: leading extents differ")
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]

    def grad_fn(g: np.ndarray):
        grads = []
        offset = 0
        for w in widths:
            grads.append(np.ascontiguousarray(g[..., offset:offset + w]))
            offset += w
        return tuple(grads)

    return _make(out, "concat_last", tuple(parts), grad_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax: subtract the axis max before exponentiating."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g: np.ndarray):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, "softmax", (a,), grad_fn)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), with the sigmoid evaluated overflow-free."""
    x = a.data
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.float32)
    out = x * sig

    def grad_fn(g: np.ndarray):
        return (g * (sig * (1.0 + x * (1.0 - sig))).astype(np.float32),)

    return _make(out, "silu", (a,), grad_fn)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """weight ⊙ x / sqrt(mean(x^2, last axis) + eps).

    The statistic is the mean of squares over the last axis; `weight` is a 1-D
    scale of matching width, broadcast over all leading axes.
    """
    if weight.ndim != 1 or weight.shape[0] != x.shape[-1]:
        raise ShapeError(f"rms_norm: weight {weight.shape} does not match {x.shape}")
    d = x.shape[-1]
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    r = np.sqrt(ms + np.float32(eps))
    u = x.data / r
    out = u * weight.data

    def grad_fn(g: np.ndarray):
        gw_axes = tuple(range(g.ndim - 1))
        gw = (g * u).sum(axis=gw_axes).astype(np.float32) if gw_axes else (g * u)
        gs = g * weight.data
        inner = (gs * x.data).sum(axis=-1, keepdims=True)
        gx = gs / r - x.data * (inner / (d * r * r * r))
        return gx.astype(np.float32), gw

    return _make(out, "rms_norm", (x, weight), grad_fn)


def rotary(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved (even, odd) feature pairs by per-position angles.

    `cos`/`sin` are constant (n, width/2) tables; positions are the second-to-
    last axis of `a`. Gradient is the inverse rotation.
    """
    width = a.shape[-1]
    if width % 2 != 0:
        raise ShapeError(f"rotary: last extent must be even, got {a.shape}")
    if cos.shape != (a.shape[-2], width // 2) or sin.shape != cos.shape:
        raise ShapeError("rotary: cos/sin tables do not match input extents")
    ev = a.data[..., 0::2]
    od = a.data[..., 1::2]
    out = np.empty_like(a.data)
    out[..., 0::2] = ev * cos - od * sin
    out[..., 1::2] = ev * sin + od * cos

    def grad_fn(g: np.ndarray):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        ga = np.empty_like(g)
        ga[..., 0::2] = ge * cos + go * sin
        ga[..., 1::2] = -ge * sin + go * cos
        return (ga,)

    return _make(out, "rotary", (a,), grad_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of any integer shape -> ids.shape + (d,)."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: id out of range [0, {table.shape[0]}), "
            f"got min {ids.min()} max {ids.max()}")
    out = table.data[ids]

    def grad_fn(g: np.ndarray):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(out, "embedding", (table,), grad_fn)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under the logits.

    Accepts (..., V) logits with (...)-shaped targets; the mean runs over every
    position. Stable log-sum-exp; returns a 0-d tensor.
    """
    targets = np.asarray(targets)
    if not np.issubdtype(targets.dtype, np.integer):
        raise ShapeError("cross_entropy: targets must be integers")
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}")
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    if t.size == 0:
        raise ShapeError("cross_entropy: no positions")
    if t.min() < 0 or t.max() >= v:
        raise ShapeError(f"cross_entropy: target id out of range [0, {v})")
    n = flat.shape[0]
    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(n), t]
    out = np.asarray(nll.mean(), dtype=np.float32)

    def grad_fn(g: np.ndarray):
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), t] -= 1.0
        gl = (p * (g / np.float32(n))).astype(np.float32)
        return (gl.reshape(logits.shape),)

    return _make(out, "cross_entropy", (logits,), grad_fn)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    out = np.asarray(a.data.sum(), dtype=np.float32)

    def grad_fn(g: np.ndarray):
        return (np.broadcast_to(g, a.shape).astype(np.float32),)

    return _make(out, "sum", (a,), grad_fn)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> Grad:
    """Reverse-mode sweep from a scalar loss over the recorded tape.

    Returns gradients for the leaf tensors (parameters) that were reachable
    and marked requires_grad; everything else is absent. Accumulation order is
    the reverse of construction order, so it is deterministic.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward: scalar root required, got shape {loss.shape}")
    if not loss.requires_grad:
        return Grad({})

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float32)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._grad_fn is None:
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    out: dict[Tensor, Tensor] = {}
    for node in topo:
        if not node._parents and node.requires_grad:
            g = grads.get(id(node))
            if g is not None:
                out[node] = Tensor(g)
    return Grad(out)
