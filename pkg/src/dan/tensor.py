"""Dense float64 tensors with tape-recorded reverse-mode differentiation.

Every primitive below computes its forward value eagerly with numpy.  When a
:class:`Tape` is active on the current thread and at least one input requires
a gradient, the primitive appends a record holding its inputs and a
vector-Jacobian closure.  ``Tape.backward`` replays those records in exact
reverse order.

All primitives accept arbitrary leading batch dimensions so a minibatch runs
through one recorded graph instead of one graph per example.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "EmptySupportError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "affine",
    "concat",
    "constant",
    "cross_entropy",
    "dot",
    "embed",
    "hinge",
    "mean",
    "mul",
    "primitive",
    "reshape",
    "scale",
    "select",
    "sigmoid",
    "softmax_masked",
    "stack",
    "sub",
    "sum_all",
    "take",
    "tanh",
    "weighted_sum",
]


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class EmptySupportError(ValueError):
    """A masked softmax was asked to normalise over zero entries."""


class Tensor:
    """A float64 array that may participate in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple, vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_local = threading.local()


def active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered log of primitive applications for one forward pass.

    Use as a context manager; primitives evaluated inside the block are
    recorded when any input requires a gradient::

        with Tape() as tape:
            loss = model.loss(batch)
        tape.backward(loss)
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        self.records.append(_Record(out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(x) into ``x.grad`` for every recorded input.

        Leaf tensors keep accumulating across calls until their ``grad`` is
        reset; intermediates are written once per tape.
        """
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad = loss.grad + 1.0
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            grads = rec.vjp(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64, copy=True)
                else:
                    inp.grad += gi
        self.records.clear()


def primitive(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` as the output of a differentiable operation.

    ``vjp(g)`` receives the upstream gradient and returns one gradient (or
    ``None``) per entry of ``inputs``.  This is also the extension point for
    user-defined operations.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return primitive(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    return primitive(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; broadcasting covers the per-item by per-memory case."""
    _broadcast_shape(a, b, "mul")
    return primitive(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    return primitive(x.data * c, (x,), lambda g: (g * c,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return primitive(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return primitive(y, (x,), lambda g: (g * y * (1.0 - y),))


def hinge(x: Tensor) -> Tensor:
    """max(0, x) with subgradient 0 at exactly 0."""
    active = x.data > 0
    return primitive(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


# ---------------------------------------------------------------------------
# linear algebra


def affine(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """W @ x + b over the last axis of ``x`` (leading axes are batch)."""
    if W.ndim != 2 or x.ndim < 1 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: W has shape {W.shape}, x has shape {x.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"affine: W has shape {W.shape}, b has shape {b.shape}")
    # einsum (no BLAS) so each output row is independent of how many rows share the call
    y = np.einsum("...j,ij->...i", x.data, W.data)
    if b is not None:
        y = y + b.data

    def vjp(g):
        gx = g @ W.data
        gW = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gW, gb)

    inputs = (x, W) if b is None else (x, W, b)
    return primitive(y, inputs, vjp)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product over the last axis."""
    if a.shape != b.shape:
        raise DimensionError(f"dot: shapes {a.shape} and {b.shape} differ")
    y = np.einsum("...i,...i->...", a.data, b.data)
    return primitive(y, (a, b), lambda g: (g[..., None] * b.data, g[..., None] * a.data))


def _sum_in_order(x: np.ndarray) -> np.ndarray:
    """Sequential sum over the last axis (keepdims), independent of trailing zeros."""
    total = x[..., 0:1].copy()
    for n in range(1, x.shape[-1]):
        total = total + x[..., n : n + 1]
    return total


def weighted_sum(weights: Tensor, rows: Tensor) -> Tensor:
    """Σ_n weights[..., n] · rows[..., n, :]."""
    if rows.ndim < 2 or weights.shape != rows.shape[:-1]:
        raise DimensionError(f"weighted_sum: weights {weights.shape} vs rows {rows.shape}")
    # left-to-right accumulation: trailing zero-weight rows (padding) add exact zeros
    w, r = weights.data, rows.data
    y = w[..., 0, None] * r[..., 0, :]
    for n in range(1, w.shape[-1]):
        y = y + w[..., n, None] * r[..., n, :]

    def vjp(g):
        gw = np.einsum("...d,...nd->...n", g, rows.data)
        gr = weights.data[..., :, None] * g[..., None, :]
        return (gw, gr)

    return primitive(y, (weights, rows), vjp)


def softmax_masked(scores: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are 0."""
    s = scores.data
    if mask is None:
        mask = np.ones(s.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
    if not mask.any(axis=-1).all():
        raise EmptySupportError("softmax over an all-masked row")
    shifted = np.where(mask, s, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    y = e / _sum_in_order(e)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return primitive(y, (scores,), vjp)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row -log softmax(logits)[target], fused through log-sum-exp."""
    z = logits.data
    t = np.asarray(targets, dtype=np.int64)
    C = z.shape[-1]
    if t.shape != z.shape[:-1]:
        raise DimensionError(f"cross_entropy: logits {z.shape} vs targets {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= C):
        raise IndexError(f"cross_entropy: target out of range [0, {C})")
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)) + zmax
    picked = np.take_along_axis(z, t[..., None], axis=-1)
    y = (lse - picked)[..., 0]
    p = np.exp(z - lse)

    def vjp(g):
        grad = p.copy()
        np.put_along_axis(grad, t[..., None], np.take_along_axis(grad, t[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * g[..., None],)

    return primitive(y, (logits,), vjp)


# ---------------------------------------------------------------------------
# structural


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ValueError("concat of an empty list")
    ax = axis % parts[0].ndim
    sizes = [p.shape[ax] for p in parts]
    try:
        y = np.concatenate([p.data for p in parts], axis=ax)
    except ValueError:
        raise DimensionError(f"concat: shapes {[p.shape for p in parts]}") from None
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return primitive(y, tuple(parts), vjp)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("stack of an empty list")
    y = np.stack([p.data for p in parts], axis=axis)
    ax = axis % y.ndim

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(parts)))

    return primitive(y, tuple(parts), vjp)


def select(x: Tensor, index: int, axis: int = 0) -> Tensor:
    """x.take(index, axis), dropping the axis."""
    ax = axis % x.ndim
    y = np.take(x.data, index, axis=ax)

    def vjp(g):
        full = np.zeros_like(x.data)
        idx = [slice(None)] * x.ndim
        idx[ax] = index
        full[tuple(idx)] = g
        return (full,)

    return primitive(y, (x,), vjp)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim
    y = np.take(x.data, idx, axis=ax)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(np.moveaxis(full, ax, 0), idx, np.moveaxis(g, ax, 0))
        return (full,)

    return primitive(y, (x,), vjp)


def embed(ids, M: Tensor) -> Tensor:
    """Rows ``M[:, ids[...]]``: token t becomes column ``ids[t]`` of M."""
    ids = np.asarray(ids, dtype=np.int64)
    V = M.shape[1]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"token id out of range [0, {V})")
    y = M.data.T[ids]

    def vjp(g):
        gM = np.zeros_like(M.data)
        np.add.at(gM.T, ids.reshape(-1), g.reshape(-1, M.shape[0]))
        return (gM,)

    return primitive(y, (M,), vjp)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    y = x.data.reshape(shape)
    return primitive(y, (x,), lambda g: (g.reshape(x.shape),))


def sum_all(x: Tensor) -> Tensor:
    return primitive(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return primitive(np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape),))
