"""Minimal dense-tensor core with reverse-mode automatic differentiation.

Values are numpy arrays; every differentiable op records a closure on a
per-forward tape. ``backward()`` walks the tape in reverse topological
order and accumulates gradients into ``.grad``. Graph construction and
backward are single-threaded per graph; tensors themselves are safe to
read concurrently.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, values, requires_grad: bool = False, _parents=(), _grad_fn=None):
        self.values = np.asarray(values)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._grad_fn = _grad_fn

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> np.ndarray:
        return np.array(self.values, copy=True)

    def accumulate_grad(self, g: np.ndarray, fresh: bool = False) -> None:
        # ``fresh`` promises g is a newly allocated array no one else
        # holds, so it can be adopted without the defensive copy
        if self.grad is None:
            self.grad = g if fresh else g.copy()
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of ``self`` (seeded with ones) into every
        reachable tensor with ``requires_grad``."""
        if seed is None:
            seed = np.ones_like(self.values)
        self.accumulate_grad(np.asarray(seed))
        for node in reversed(_topo_order(self)):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and ndarrays are treated as constants
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __neg__(self):
        return mul(self, _coerce(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf tensor; identity in checkpoints comes from the
    attribute path under which a Module exposes it."""

    def __init__(self, values):
        super().__init__(values, requires_grad=True)


class Module:
    """Lightweight container: parameters are discovered by walking
    attributes (insertion order, hence deterministic)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, attr in vars(self).items():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(attr, Parameter):
                yield path, attr
            elif isinstance(attr, Module):
                yield from attr.named_parameters(path)
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS: recursion would overflow on deep decoder graphs.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(values: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        live = tuple(p for p in parents if p.requires_grad)
        return Tensor(values, requires_grad=True, _parents=live, _grad_fn=grad_fn)
    return Tensor(values)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.values + b.values

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.values.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.values.shape))

    return _make(out, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.values - b.values

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.values.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.values.shape))

    return _make(out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.values * b.values

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.values, a.values.shape), fresh=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.values, b.values.shape), fresh=True)

    return _make(out, (a, b), grad_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.values / b.values

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.values, a.values.shape), fresh=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * out / b.values, b.values.shape), fresh=True)

    return _make(out, (a, b), grad_fn)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    # ties send the gradient to the first argument
    mask = a.values >= b.values
    out = np.where(mask, a.values, b.values)

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * mask, a.values.shape), fresh=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * ~mask, b.values.shape), fresh=True)

    return _make(out, (a, b), grad_fn)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    mask = a.values <= b.values
    out = np.where(mask, a.values, b.values)

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * mask, a.values.shape), fresh=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * ~mask, b.values.shape), fresh=True)

    return _make(out, (a, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.values, 0)

    def grad_fn(g):
        x.accumulate_grad(g * (x.values > 0), fresh=True)

    return _make(out, (x,), grad_fn)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x): smooth rectifier, friendly to finite-difference checks."""
    s = _sigmoid_np(x.values)
    out = x.values * s

    def grad_fn(g):
        x.accumulate_grad(g * (s * (1.0 + x.values * (1.0 - s))), fresh=True)

    return _make(out, (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.values)

    def grad_fn(g):
        x.accumulate_grad(g * out * (1.0 - out), fresh=True)

    return _make(out, (x,), grad_fn)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)

    def grad_fn(g):
        x.accumulate_grad(g * out, fresh=True)

    return _make(out, (x,), grad_fn)


def log(x: Tensor) -> Tensor:
    out = np.log(x.values)

    def grad_fn(g):
        x.accumulate_grad(g / x.values, fresh=True)

    return _make(out, (x,), grad_fn)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.values)

    def grad_fn(g):
        x.accumulate_grad(g * 0.5 / out, fresh=True)

    return _make(out, (x,), grad_fn)


def square(x: Tensor) -> Tensor:
    out = x.values * x.values

    def grad_fn(g):
        x.accumulate_grad(g * 2.0 * x.values, fresh=True)

    return _make(out, (x,), grad_fn)


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.values)

    def grad_fn(g):
        x.accumulate_grad(g * np.sign(x.values), fresh=True)

    return _make(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: equally batched operands, or a stacked lhs against
    a plain-matrix rhs (the shared-weight case)."""
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ValueError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.values.shape[-1] != b.values.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    stacked_lhs = a.values.ndim > 2 and b.values.ndim == 2
    if not stacked_lhs and (
        a.values.ndim != b.values.ndim or a.values.shape[:-2] != b.values.shape[:-2]
    ):
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    out = a.values @ b.values

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.values.swapaxes(-1, -2), fresh=True)
        if b.requires_grad:
            if stacked_lhs:
                k, n = b.values.shape
                gb = a.values.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = a.values.swapaxes(-1, -2) @ g
            b.accumulate_grad(gb, fresh=True)

    return _make(out, (a, b), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.values.shape
    out = x.values.reshape(shape)

    def grad_fn(g):
        x.accumulate_grad(g.reshape(orig))

    return _make(out, (x,), grad_fn)


def transpose(x: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    out = x.values.transpose(axes)

    def grad_fn(g):
        x.accumulate_grad(g.transpose(inverse))

    return _make(out, (x,), grad_fn)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.values.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                p.accumulate_grad(piece)

    return _make(out, tuple(parts), grad_fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.values.ndim
    index = [slice(None)] * x.values.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = x.values[index]

    def grad_fn(g):
        gx = np.zeros_like(x.values)
        gx[index] = g
        x.accumulate_grad(gx, fresh=True)

    return _make(out, (x,), grad_fn)


def take_rows(x: Tensor, indices) -> Tensor:
    idx = np.asarray(indices)
    out = x.values[idx]

    def grad_fn(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, idx, g)
        x.accumulate_grad(gx, fresh=True)

    return _make(out, (x,), grad_fn)


def take_rows_batched(x: Tensor, indices: np.ndarray) -> Tensor:
    """Per-batch gather: out[b, i] = x[b, indices[b, i]]."""
    idx = np.asarray(indices)
    batch = np.arange(x.values.shape[0])[:, None]
    out = x.values[batch, idx]

    def grad_fn(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, (batch, idx), g)
        x.accumulate_grad(gx, fresh=True)

    return _make(out, (x,), grad_fn)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate_grad(np.broadcast_to(g, x.values.shape).astype(x.values.dtype, copy=False))

    return _make(out, (x,), grad_fn)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.values.size if axis is None else x.values.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), _coerce(1.0 / n))


# ---------------------------------------------------------------------------
# fused neural primitives


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to 1 for finite input."""
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        x.accumulate_grad((g - inner) * out, fresh=True)

    return _make(out, (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.values.shape[-1] != gain.values.shape[-1]:
        raise ValueError("layer_norm: gain length must match the last axis")
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.values + bias.values

    def grad_fn(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0), fresh=True)
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, g.shape[-1]).sum(axis=0), fresh=True)
        if x.requires_grad:
            gy = g * gain.values
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad((gy - m1 - xhat * m2) * inv, fresh=True)

    return _make(out, (x, gain, bias), grad_fn)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy against soft targets, computed in
    logit space so it stays finite for any input."""
    t = np.asarray(targets)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("bce targets must lie in [0, 1]")
    x = logits.values
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def grad_fn(g):
        logits.accumulate_grad(g * (_sigmoid_np(x) - t), fresh=True)

    return _make(out, (logits,), grad_fn)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity on values; the output is a constant leaf, so exactly zero
    gradient reaches ``x`` through this edge."""
    return Tensor(x.values.copy())


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Stable sigmoid on plain arrays (shared with non-graph code paths)."""
    return _sigmoid_np(np.asarray(x))


def inverse_sigmoid_np(p: np.ndarray, eps: float = 1e-7) -> np.ndarray:
    p = np.clip(np.asarray(p), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)
