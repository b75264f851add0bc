"""Dense tensors with a reverse-mode gradient tape.

Design notes:
  - float32 is the working precision for all model math; float64 is accepted
    so tests can run a high-precision replica of the same graph.
  - storage is row-major and reshapes copy; there are no views or strides.
  - every exposed op validates that its output is finite and raises NonFinite
    otherwise. NaN/Inf is an error state, never a value.
  - ops record onto the innermost active GradTape when any input requires a
    gradient. backward() walks the tape once, in reverse recording order,
    which is already a topological order of the forward graph.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DisconnectedGraph, NonFinite, ShapeMismatch

_LOCAL = threading.local()


def _tape_stack() -> list["GradTape"]:
    if not hasattr(_LOCAL, "stack"):
        _LOCAL.stack = []
    return _LOCAL.stack


def active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """n-d float array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False, dtype=np.float32):
        if dtype not in (np.float32, np.float64):
            raise ShapeMismatch(f"unsupported dtype {dtype!r}")
        arr = np.asarray(values, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFinite("tensor constructed with NaN/Inf values")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("output", "parents", "backward_fn")

    def __init__(self, output: Tensor, parents: tuple[Tensor, ...], backward_fn):
        self.output = output
        self.parents = parents
        self.backward_fn = backward_fn


class GradTape:
    """Ordered op record for one forward pass. Use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def record_op(out_values: np.ndarray, parents: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap op output values in a Tensor, registering the gradient rule.

    backward_fn maps the output gradient to one gradient (or None) per parent.
    Composite modules build their own fused ops through this hook.
    """
    out = Tensor.__new__(Tensor)
    out.data = out_values
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if not np.all(np.isfinite(out_values)):
        raise NonFinite("operation produced NaN/Inf")
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append(_Node(out, tuple(parents), backward_fn))
    return out


def backward(loss: Tensor, tape: GradTape) -> None:
    """Accumulate gradients of a scalar loss into every requires_grad tensor.

    Visits each tape node exactly once, newest first. Raises DisconnectedGraph
    when the loss was not produced through this tape.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(node.output) for node in tape.nodes}
    if id(loss) not in produced:
        raise DisconnectedGraph("loss tensor was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        out_grad = grads.pop(id(node.output), None)
        if out_grad is None:
            continue  # not on any path to the loss
        holders.pop(id(node.output), None)
        parent_grads = node.backward_fn(out_grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                holders[key] = parent
    for key, tensor in holders.items():
        g = grads[key]
        tensor.grad = g if tensor.grad is None else tensor.grad + g


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """out = a @ b. a (m, k), b (k, n) -> out (m, n)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return record_op(ad @ bd, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b; b may also be a rank-1 bias broadcast over rows."""
    if a.shape == b.shape:
        def bwd(g):
            return g, g
    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def bwd(g):
            axes = tuple(range(g.ndim - 1))
            return g, g.sum(axis=axes)
    else:
        raise ShapeMismatch(f"add {a.shape} + {b.shape}")
    return record_op(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a * b, same shapes."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul {a.shape} * {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return record_op(ad * bd, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    """out = c * x for a python scalar c."""
    c = float(c)

    def bwd(g):
        return (g * c,)

    return record_op(x.data * np.asarray(c, dtype=x.dtype), (x,), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return record_op(np.where(mask, x.data, 0), (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-d tensor, stabilized by max subtraction."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"softmax_rows expects 2-d input, got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NonFinite("softmax_rows input contains NaN/Inf")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * probs).sum(axis=1, keepdims=True)
        return (probs * (g - dot),)

    return record_op(probs, (x,), bwd)


def concat_last_axis(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-d tensors along the last axis. Row counts must agree."""
    if not parts:
        raise ShapeMismatch("concat_last_axis of zero tensors")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeMismatch(f"concat_last_axis row mismatch {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=1))

    return record_op(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-d tensors along the first axis. Widths must agree."""
    if not parts:
        raise ShapeMismatch("concat_rows of zero tensors")
    width = parts[0].shape[-1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != width:
            raise ShapeMismatch(f"concat_rows width mismatch {[p.shape for p in parts]}")
    heights = [p.shape[0] for p in parts]
    splits = np.cumsum(heights)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=0))

    return record_op(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd)


def transpose_last_two(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatch(f"transpose_last_two expects 2-d input, got {x.shape}")

    def bwd(g):
        return (np.ascontiguousarray(g.T),)

    return record_op(np.ascontiguousarray(x.data.T), (x,), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Copying reshape; total element count must be preserved."""
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeMismatch(f"reshape {x.shape} -> {shape}")
    old = x.shape

    def bwd(g):
        return (g.reshape(old),)

    return record_op(x.data.reshape(shape).copy(), (x,), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows: table (V, d), ids (L,) ints -> out (L, d)."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1 or table.data.ndim != 2:
        raise ShapeMismatch(f"embedding_lookup table {table.shape}, ids {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatch(f"embedding id out of range for table {table.shape}")

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return record_op(table.data[idx].copy(), (table,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm params {gain.shape}/{bias.shape} for input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gd = gain.data

    def bwd(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record_op(xhat * gd + bias.data, (x, gain, bias), bwd)


def conv3x3(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding.

    x (H, W, Cin), kernel (3, 3, Cin, Cout), bias (Cout,) -> out (H, W, Cout).
    """
    if x.data.ndim != 3 or kernel.shape[:2] != (3, 3) or kernel.shape[2] != x.shape[2]:
        raise ShapeMismatch(f"conv3x3 x {x.shape}, kernel {kernel.shape}")
    cout = kernel.shape[3]
    if bias.shape != (cout,):
        raise ShapeMismatch(f"conv3x3 bias {bias.shape} for kernel {kernel.shape}")
    h, w, cin = x.shape
    xp = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    out = np.tile(bias.data, (h, w, 1)).astype(x.dtype)
    # nine shifted matmuls instead of an im2col buffer
    for di in range(3):
        for dj in range(3):
            patch = xp[di:di + h, dj:dj + w, :].reshape(h * w, cin)
            out += (patch @ kernel.data[di, dj]).reshape(h, w, cout)

    def bwd(g):
        g2 = g.reshape(h * w, cout)
        dxp = np.zeros_like(xp)
        dk = np.zeros_like(kernel.data)
        for di in range(3):
            for dj in range(3):
                patch = xp[di:di + h, dj:dj + w, :].reshape(h * w, cin)
                dk[di, dj] = patch.T @ g2
                dxp[di:di + h, dj:dj + w, :] += (g2 @ kernel.data[di, dj].T).reshape(h, w, cin)
        return dxp[1:-1, 1:-1, :], dk, g.sum(axis=(0, 1))

    return record_op(out, (x, kernel, bias), bwd)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped.

    Gradient routes to the first maximum within each window on ties.
    """
    if x.data.ndim != 3:
        raise ShapeMismatch(f"maxpool2x2 expects (H, W, C), got {x.shape}")
    h, w, c = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ShapeMismatch(f"maxpool2x2 input too small {x.shape}")
    win = x.data[:2 * ho, :2 * wo, :].reshape(ho, 2, wo, 2, c)
    flat = win.transpose(0, 2, 4, 1, 3).reshape(ho, wo, c, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        dwin = dflat.reshape(ho, wo, c, 2, 2).transpose(0, 3, 1, 4, 2)
        dx = np.zeros_like(x.data)
        dx[:2 * ho, :2 * wo, :] = dwin.reshape(2 * ho, 2 * wo, c)
        return (dx,)

    return record_op(np.ascontiguousarray(out), (x,), bwd)


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pool: x (H, W, C) -> out (C,)."""
    if x.data.ndim != 3:
        raise ShapeMismatch(f"spatial_mean expects (H, W, C), got {x.shape}")
    h, w, _ = x.shape
    n = h * w

    def bwd(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=True),)

    return record_op(x.data.mean(axis=(0, 1)), (x,), bwd)


def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all elements -> rank-0 scalar."""

    def bwd(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return record_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bwd)


def reduce_mean(x: Tensor) -> Tensor:
    """Mean of all elements -> rank-0 scalar."""
    n = x.data.size

    def bwd(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=True),)

    return record_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bwd)
