"""Dense tensors with reverse-mode differentiation.

The computation graph is carried implicitly: every op links its output to
its input tensors, and ``Tensor.backward()`` walks that linkage in reverse
topological order. ``detach`` cuts the linkage while sharing the forward
value, which is what the truncated-gradient recurrence schedule relies on.

Shapes are strict: elementwise ops require identical shapes and the only
way to change rank or repeat data is an explicit ``broadcast_to``. Shape
bugs fail loudly with the op name and the offending shapes.
"""

from __future__ import annotations

import json
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Inconsistent operand shapes for an op."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values unchanged)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense real array plus an optional gradient accumulator.

    ``data`` is always a numpy float array. ``grad`` is populated (same
    shape as ``data``) by ``backward()`` for every tensor that influenced
    the loss through recorded ops; leaves that the loss does not reach
    keep ``grad = None``, which reads as zero.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Value-identical tensor that backward treats as a constant leaf."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar loss.

        Raises if called on a non-scalar tensor. Populates ``grad`` on
        every tensor the loss reaches through recorded ops.
        """
        if self.data.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {self.data.shape}")
        topo = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn()

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topo_order(root: Tensor) -> list:
    """Iterative post-order over the parent links (acyclic by construction)."""
    topo = []
    visited = set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, children = stack[-1]
        advanced = False
        for child in children:
            if id(child) not in visited:
                visited.add(id(child))
                stack.append((child, iter(child._parents)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            topo.append(node)
    return topo


def _make(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy-style broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out_data = a.data + b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    out = _make(out_data, (a, b), backward, "add")
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out_data = a.data * b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    out = _make(out_data, (a, b), backward, "mul")
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = a.data * s

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * s)

    out = _make(out_data, (a,), backward, "scale")
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward():
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    out = _make(out_data, (a, b), backward, "matmul")
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out_data = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))

    out = _make(out_data, (a,), backward, "broadcast_to")
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.shape))

    out = _make(out_data, (a,), backward, "reshape")
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward():
        if a.requires_grad:
            a._accumulate(np.transpose(out.grad, inverse))

    out = _make(out_data, (a,), backward, "transpose")
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]

    def backward():
        offset = 0
        for t, ext in zip(tensors, extents):
            if t.requires_grad:
                index = [slice(None)] * out_data.ndim
                index[axis] = slice(offset, offset + ext)
                t._accumulate(out.grad[tuple(index)])
            offset += ext

    out = _make(out_data, tuple(tensors), backward, "concat")
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: window [{start}, {start + length}) outside axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out_data = a.data[index].copy()

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[index] = out.grad
            a._accumulate(g)

    out = _make(out_data, (a,), backward, "narrow")
    return out


# ---------------------------------------------------------------------------
# nonlinearities and fused layers


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * (1.0 - out_data * out_data))

    out = _make(out_data, (a,), backward, "tanh")
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward():
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            a._accumulate(out.grad * da)

    out = _make(out_data, (a,), backward, "gelu")
    return out


def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the last axis; rows of the output sum to 1."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward():
        if a.requires_grad:
            g = out.grad
            inner = (g * out_data).sum(axis=-1, keepdims=True)
            a._accumulate((g - inner) * out_data)

    out = _make(out_data, (a,), backward, "softmax")
    return out


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, no bias."""
    if gain.shape != a.shape[-1:]:
        raise ShapeError(f"rms_norm: gain shape {gain.shape} does not match feature dim of {a.shape}")
    x = a.data
    d = x.shape[-1]
    ms = (x * x).mean(axis=-1, keepdims=True) + eps
    inv = 1.0 / np.sqrt(ms)
    normed = x * inv
    out_data = normed * gain.data

    def backward():
        g = out.grad
        if a.requires_grad:
            gg = g * gain.data
            coeff = (gg * x).sum(axis=-1, keepdims=True) / d
            a._accumulate(gg * inv - x * coeff * (inv * inv * inv))
        if gain.requires_grad:
            gain._accumulate((g * normed).reshape(-1, d).sum(axis=0))

    out = _make(out_data, (a, gain), backward, "rms_norm")
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.shape[0]:
        raise IndexError(f"embedding: id outside vocabulary of size {table.shape[0]}")
    out_data = table.data[ids]

    def backward():
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.shape[1]))
            table._accumulate(g)

    out = _make(out_data, (table,), backward, "embedding")
    return out


def rope(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary rotation on the last axis; ``cos``/``sin`` are [S, dh] constants.

    ``a`` is [..., S, dh] with even dh. Equal position shifts of query and
    key leave their dot product unchanged, which is the property the
    attention stack relies on.
    """
    dh = a.shape[-1]
    if dh % 2 != 0 or cos.shape != a.shape[-2:] or sin.shape != a.shape[-2:]:
        raise ShapeError(f"rope: input {a.shape} incompatible with tables {cos.shape}")
    x = a.data
    half = dh // 2
    rotated = np.concatenate([-x[..., half:], x[..., :half]], axis=-1)
    out_data = x * cos + rotated * sin

    def backward():
        if a.requires_grad:
            g = out.grad
            gs = g * sin
            a._accumulate(g * cos + np.concatenate([gs[..., half:], -gs[..., :half]], axis=-1))

    out = _make(out_data, (a,), backward, "rope")
    return out


def sum_all(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum())

    def backward():
        if a.requires_grad:
            a._accumulate(np.broadcast_to(out.grad, a.shape).copy())

    out = _make(out_data, (a,), backward, "sum")
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.asarray(a.data.mean())

    def backward():
        if a.requires_grad:
            a._accumulate(np.broadcast_to(out.grad / n, a.shape).copy())

    out = _make(out_data, (a,), backward, "mean")
    return out


def detach(a: Tensor) -> Tensor:
    return a.detach()


# ---------------------------------------------------------------------------
# fused losses


def _stablemax_s(x: np.ndarray):
    neg = x < 0
    inv = 1.0 / (1.0 - x)
    s = np.where(neg, inv, x + 1.0)
    ds = np.where(neg, inv * inv, 1.0)
    return s, ds


def stablemax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Cross entropy over the piecewise-rational transform
    s(x) = x + 1 for x >= 0, 1/(1 - x) for x < 0, normalized per position.

    ``targets`` holds int ids shaped like ``logits`` minus the last axis;
    the loss is the mean negative log target probability over positions.
    """
    if not np.isfinite(logits.data).all():
        raise FloatingPointError("stablemax_cross_entropy: non-finite logits")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"stablemax_ce: targets {targets.shape} do not match logits {logits.shape}")
    s, ds = _stablemax_s(logits.data)
    total = s.sum(axis=-1, keepdims=True)
    t_idx = np.expand_dims(targets, -1)
    s_t = np.take_along_axis(s, t_idx, axis=-1)
    n = targets.size
    out_data = np.asarray((np.log(total.reshape(-1)) - np.log(s_t.reshape(-1))).mean())

    def backward():
        if logits.requires_grad:
            g = ds / total
            np.put_along_axis(g, t_idx, np.take_along_axis(g - ds / s_t, t_idx, axis=-1), axis=-1)
            logits._accumulate(out.grad * g / n)

    out = _make(out_data, (logits,), backward, "stablemax_ce")
    return out


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Plain softmax cross entropy (ablation alternative to stablemax)."""
    if not np.isfinite(logits.data).all():
        raise FloatingPointError("softmax_cross_entropy: non-finite logits")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"softmax_ce: targets {targets.shape} do not match logits {logits.shape}")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    t_idx = np.expand_dims(targets, -1)
    n = targets.size
    out_data = np.asarray(-np.take_along_axis(logp, t_idx, axis=-1).mean())

    def backward():
        if logits.requires_grad:
            g = np.exp(logp)
            np.put_along_axis(g, t_idx, np.take_along_axis(g, t_idx, axis=-1) - 1.0, axis=-1)
            logits._accumulate(out.grad * g / n)

    out = _make(out_data, (logits,), backward, "softmax_ce")
    return out


# ---------------------------------------------------------------------------
# serialization: JSON shape header followed by a flat little-endian payload

_DTYPE_TAGS = {"<f8": "<f8", "<f4": "<f4"}


def write_array(fh, arr: np.ndarray, tag: dict | None = None):
    """Write one array: JSON header line + raw little-endian bytes."""
    dtype = "<f4" if arr.dtype == np.float32 else "<f8"
    header = {"shape": list(arr.shape), "dtype": dtype}
    if tag:
        header["tag"] = tag
    fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_array(fh):
    """Read one array written by ``write_array``; returns (array, tag or None).

    Returns (None, None) at end of file.
    """
    line = fh.readline()
    if not line:
        return None, None
    header = json.loads(line.decode("utf-8"))
    dtype = _DTYPE_TAGS[header["dtype"]]
    shape = tuple(header["shape"])
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(count * np.dtype(dtype).itemsize)
    arr = np.frombuffer(raw, dtype=dtype, count=count).reshape(shape).copy()
    return arr, header.get("tag")


def save_array(path, arr: np.ndarray):
    with open(path, "wb") as fh:
        write_array(fh, arr)


def load_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = read_array(fh)
    return arr


def save_tagged_arrays(path, items):
    """Write a sequence of (tag dict, array) blocks to one container file."""
    with open(path, "wb") as fh:
        for tag, arr in items:
            write_array(fh, arr, tag=tag)


def load_tagged_arrays(path):
    items = []
    with open(path, "rb") as fh:
        while True:
            arr, tag = read_array(fh)
            if arr is None:
                break
            items.append((tag, arr))
    return items
