"""Dense float64 tensors with a dynamically-built reverse-mode tape.

Every op records its parents and a closure that maps the output gradient to
parent-gradient contributions. `backward` walks the tape in reverse
topological order. Only leaf tensors (requires_grad and not produced by an
op) accumulate into `.grad`; intermediate gradients live in a scratch map so
repeated backward calls stay well defined.

Broadcasting is deliberately restricted: elementwise ops take same-shape
operands, python-number constants, or a 1-D bias added to the trailing axis.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

from rlqfs.errors import ContractError, NumericInputError, ShapeError

Number = Union[int, float]

# per-thread so concurrent tape-free inference cannot disable another
# thread's training tape
_tape_state = threading.local()


class no_grad:
    """Context manager: ops inside build no tape and propagate no grads."""

    def __enter__(self):
        self._prev = grad_enabled()
        _tape_state.enabled = False
        return self

    def __exit__(self, *exc):
        _tape_state.enabled = self._prev
        return False


def grad_enabled() -> bool:
    return getattr(_tape_state, "enabled", True)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._parents: tuple = ()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, attaching tape state when grads are live."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate gradients of every reachable leaf from a scalar loss.

    Leaf grads accumulate across calls; intermediates use scratch storage.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    scratch: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def send(t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        if t._backward is None:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
        else:
            acc = scratch.get(id(t))
            if acc is None:
                scratch[id(t)] = np.array(g, dtype=np.float64, copy=True)
            else:
                acc += g

    for node in reversed(topo):
        if node._backward is None:
            continue
        g = scratch.pop(id(node), None)
        if g is None:
            continue
        node._backward(g, send)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        data = a.data + b

        def bwd(g, send):
            send(a, g)

        return _make(data, (a,), bwd)
    if isinstance(b, np.ndarray):
        if b.shape != a.shape:
            raise ShapeError(f"add constant shape {b.shape} vs tensor {a.shape}")
        data = a.data + b

        def bwd(g, send):
            send(a, g)

        return _make(data, (a,), bwd)
    b = _as_tensor(b)
    if a.shape == b.shape:
        data = a.data + b.data

        def bwd(g, send):
            send(a, g)
            send(b, g)

        return _make(data, (a, b), bwd)
    # trailing-dimension bias: [.., d] + [d]
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        data = a.data + b.data

        def bwd(g, send):
            send(a, g)
            send(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

        return _make(data, (a, b), bwd)
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return add(b, a)
    raise ShapeError(f"add shapes {a.shape} and {b.shape} (only same-shape or trailing bias)")


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        data = a.data * c

        def bwd(g, send):
            send(a, g * c)

        return _make(data, (a,), bwd)
    if isinstance(b, np.ndarray):
        if b.shape != a.shape:
            raise ShapeError(f"mul constant shape {b.shape} vs tensor {a.shape}")
        const = b
        data = a.data * const

        def bwd(g, send):
            send(a, g * const)

        return _make(data, (a,), bwd)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} and {b.shape} (same shape required)")
    data = a.data * b.data

    def bwd(g, send):
        send(a, g * b.data)
        send(b, g * a.data)

    return _make(data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def bwd(g, send):
        send(a, g @ b.data.T)
        send(b, a.data.T @ g)

    return _make(data, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs rank-2, got {a.shape}")
    data = a.data.T

    def bwd(g, send):
        send(a, g.T)

    return _make(data, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    old = a.shape

    def bwd(g, send):
        send(a, g.reshape(old))

    return _make(data, (a,), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-pads."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]

    def bwd(g, send):
        full = np.zeros_like(a.data)
        full[idx] = g
        send(a, full)

    return _make(data, (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def bwd(g, send):
        offset = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            send(p, g[tuple(idx)])
            offset += n

    return _make(data, parts, bwd)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd(g, send):
        send(a, g * (1.0 - data * data))

    return _make(data, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    # tanh form of GELU; the derivative matches this definition exactly
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    data = 0.5 * x * (1.0 + t)

    def bwd(g, send):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        send(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g, send):
        send(a, g * data * (1.0 - data))

    return _make(data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd(g, send):
        send(a, g / a.data)

    return _make(data, (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values into [lo, hi]; gradient is zero where the clip binds."""
    data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g, send):
        send(a, g * inside)

    return _make(data, (a,), bwd)


def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    data = a.data.sum(axis=axis)

    def bwd(g, send):
        if axis is None:
            send(a, np.full_like(a.data, float(g)))
        else:
            send(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(data, (a,), bwd)


def tmean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather from [V, d]; backward scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got shape {idx.shape}")
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be rank-2, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table of {table.shape[0]} rows")
    data = table.data[idx]

    def bwd(g, send):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        send(table, full)

    return _make(data, (table,), bwd)


def gather_pairs(a: Tensor, rows, cols) -> Tensor:
    """a[rows[k], cols[k]] for each k -> 1-D tensor."""
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    if a.ndim != 2 or r.shape != c.shape or r.ndim != 1:
        raise ShapeError(f"gather_pairs on {a.shape} with rows {r.shape}, cols {c.shape}")
    data = a.data[r, c]

    def bwd(g, send):
        full = np.zeros_like(a.data)
        np.add.at(full, (r, c), g)
        send(a, full)

    return _make(data, (a,), bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Train-mode inverted dropout; p == 0 is the identity."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability {p} outside [0, 1)")
    if p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, mask)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis, then scale and shift."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params {gain.shape}/{bias.shape} vs features {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    data = xhat * gain.data + bias.data

    def bwd(g, send):
        gg = g * gain.data
        send(
            a,
            inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True)),
        )
        red = tuple(range(a.ndim - 1))
        send(gain, (g * xhat).sum(axis=red))
        send(bias, g.sum(axis=red))

    return _make(data, (a, gain, bias), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.isfinite(a.data).all():
        raise NumericInputError("softmax received non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, send):
        dot = (g * data).sum(axis=axis, keepdims=True)
        send(a, data * (g - dot))

    return _make(data, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.isfinite(a.data).all():
        raise NumericInputError("log_softmax received non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def bwd(g, send):
        send(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), bwd)


def cross_entropy(logits: Tensor, targets, ignore_index: Optional[int] = None) -> Tensor:
    """Mean over non-ignored positions of -log softmax(logits)[t, target_t]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy logits must be [T, V], got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.ndim != 1 or tgt.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy targets {tgt.shape} vs logits {logits.shape}")
    v = logits.shape[1]
    keep = np.ones(tgt.shape[0], dtype=bool) if ignore_index is None else tgt != ignore_index
    checked = tgt[keep]
    if checked.size and (checked.min() < 0 or checked.max() >= v):
        raise IndexError(f"cross_entropy target out of range for vocab {v}")
    if not keep.any():
        return Tensor(0.0)
    rows = np.nonzero(keep)[0]
    logp = log_softmax(logits, axis=-1)
    picked = gather_pairs(logp, rows, tgt[rows])
    return mul(tsum(picked), -1.0 / rows.size)


__all__ = [
    "Tensor",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "narrow",
    "concat",
    "tanh",
    "gelu",
    "sigmoid",
    "log",
    "clamp",
    "tsum",
    "tmean",
    "embedding",
    "gather_pairs",
    "dropout",
    "layer_norm",
    "softmax",
    "log_softmax",
    "cross_entropy",
]
