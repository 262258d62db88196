"""Small reverse-mode autodiff engine over float64 numpy arrays.

Graphs are built eagerly: every op returns a :class:`Tensor` that caches its
forward value and a closure that routes the output adjoint back to its inputs.
:func:`backward_grad` walks the graph in reverse topological order.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

logger = logging.getLogger(__name__)

GROUPS = ("body", "head", "graph")

ArrayLike = Union["Tensor", np.ndarray, float, int]


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class GradientError(RuntimeError):
    pass


class Tensor:
    """A node of the expression graph.

    ``value`` holds the forward result, ``grad`` the adjoint accumulated by the
    most recent backward pass. Leaves have no parents.
    """

    __slots__ = ("value", "grad", "op", "parents", "_backward", "requires_grad", "name")

    def __init__(self, value, op: str = "const", parents: tuple["Tensor", ...] = (),
                 backward: Callable[[np.ndarray], tuple] | None = None,
                 requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor({self.op}{label}, shape={self.shape})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def leaf(value, name: str | None = None) -> Tensor:
    """A differentiable input."""
    return Tensor(value, op="leaf", requires_grad=True, name=name)


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(value: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op}: non-finite value in forward pass")
    if not any(p.requires_grad for p in parents):
        return Tensor(value, op=op)
    return Tensor(value, op=op, parents=parents, backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _node(a.value + b.value, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _node(a.value - b.value, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _node(a.value * b.value, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.value / b.value

    def backward(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * out / b.value, b.shape))
    return _node(out, "div", (a, b), backward)


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise max; ties send the adjoint to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("maximum", a, b)
    pick_a = a.value >= b.value
    return _node(np.where(pick_a, a.value, b.value), "maximum", (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def scale(a: ArrayLike, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.value * c, "scale", (a,), lambda g: (g * c,))


def shift(a: ArrayLike, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.value + c, "shift", (a,), lambda g: (g,))


def power(a: ArrayLike, p: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.value ** p, "power", (a,), lambda g: (g * p * a.value ** (p - 1),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _node(a.value * mask, "relu", (a,), lambda g: (g * mask,))


def clip(a: ArrayLike, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _node(np.clip(a.value, lo, hi), "clip", (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- structural

def reshape(a: ArrayLike, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: ArrayLike) -> Tensor:
    """Collapse every axis but the first."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _node(a.value.T, "transpose", (a,), lambda g: (g.T,))


def sum_(a: ArrayLike, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(np.asarray(out), "sum", (a,), backward)


def mean(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return scale(sum_(a), 1.0 / a.value.size)


# ---------------------------------------------------------------- linear algebra

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _node(a.value @ b.value, "matmul", (a, b),
                 lambda g: (g @ b.value.T, a.value.T @ g))


def linear(x: ArrayLike, w: ArrayLike, b: ArrayLike) -> Tensor:
    """Affine layer ``x @ w.T + b`` with ``w`` of shape (out, in)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError("linear", x.shape, w.shape, b.shape)
    out = x.value @ w.value.T + b.value
    return _node(out, "linear", (x, w, b),
                 lambda g: (g @ w.value, g.T @ x.value, g.sum(axis=0)))


def pairwise_sqdist(x: ArrayLike) -> Tensor:
    """Squared Euclidean distances between the rows of ``x`` (M, d) -> (M, M)."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("pairwise_sqdist", x.shape)
    v = x.value
    diff = v[:, None, :] - v[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def backward(g):
        gs = g + g.T
        return (2.0 * (gs.sum(axis=1)[:, None] * v - gs @ v),)
    return _node(out, "pairwise_sqdist", (x,), backward)


# ---------------------------------------------------------------- conv / pool / norm

def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, H, W, C*9) patches of a zero-padded 3x3 window."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))  # B,C,H,W,3,3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B, H, W, C * 9)


def conv2d(x: ArrayLike, w: ArrayLike, b: ArrayLike) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1. ``w``: (out, in, 3, 3)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if (x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or x.shape[1] != w.shape[1]
            or b.shape != (w.shape[0],)):
        raise ShapeError("conv2d", x.shape, w.shape, b.shape)
    B, C, H, W = x.shape
    O = w.shape[0]
    cols = _im2col(x.value)
    wmat = w.value.reshape(O, -1)
    out = (cols @ wmat.T + b.value).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1)  # B,H,W,O
        gw = np.tensordot(gm, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(w.shape)
        gb = gm.sum(axis=(0, 1, 2))
        gcols = (gm @ wmat).reshape(B, H, W, C, 3, 3)
        gxp = np.zeros((B, C, H + 2, W + 2))
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + H, j:j + W] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gxp[:, :, 1:-1, 1:-1], gw, gb
    return _node(np.ascontiguousarray(out), "conv2d", (x, w, b), backward)


def maxpool2(x: ArrayLike) -> Tensor:
    """2x2 max-pool, stride 2; an odd trailing row/column is dropped."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError("maxpool2", x.shape)
    B, C, H, W = x.shape
    h, w = H // 2, W // 2
    blocks = x.value[:, :, :2 * h, :2 * w].reshape(B, C, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(B, C, h, w, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((B, C, h, w, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * h, 2 * w)
        gx = np.zeros(x.shape)
        gx[:, :, :2 * h, :2 * w] = gb
        return (gx,)
    return _node(out, "maxpool2", (x,), backward)


def batchnorm(x: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalize with the statistics of the current batch (per channel for 4-D input)."""
    x = as_tensor(x)
    if x.ndim == 4:
        axes = (0, 2, 3)
    elif x.ndim == 2:
        axes = (0,)
    else:
        raise ShapeError("batchnorm", x.shape)
    mu = x.value.mean(axis=axes, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=axes, keepdims=True) + eps)
    out = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * out).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - out * gxm),)
    return _node(out, "batchnorm", (x,), backward)


# ---------------------------------------------------------------- softmax / losses

def softmax(x: ArrayLike) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("softmax", x.shape)
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return _node(p, "softmax", (x,),
                 lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: ArrayLike, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (B, N) logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    B = logits.shape[0]
    logp = log_softmax_np(logits.value)
    loss = -logp[np.arange(B), labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[np.arange(B), labels] -= 1.0
        return (g * d / B,)
    return _node(np.asarray(loss), "cross_entropy", (logits,), backward)


def soft_cross_entropy(probs: ArrayLike, labels: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Mean ``-log p[label]`` for a matrix of probabilities."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeError("soft_cross_entropy", probs.shape, labels.shape)
    B = probs.shape[0]
    picked = probs.value[np.arange(B), labels] + eps
    loss = -np.log(picked).mean()

    def backward(g):
        d = np.zeros(probs.shape)
        d[np.arange(B), labels] = -1.0 / (B * picked)
        return (g * d,)
    return _node(np.asarray(loss), "soft_cross_entropy", (probs,), backward)


# ---------------------------------------------------------------- backward pass

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward_grad(loss: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to the leaves in ``wrt``.

    Leaves that the loss does not depend on get exact zeros.
    """
    if loss.value.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.shape}")
    for t in wrt.values():
        t.grad = None
    if loss.requires_grad:
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(_toposort(loss)):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                adj[key] = pg if key not in adj else adj[key] + pg
    return {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.value))
            for name, t in wrt.items()}


def forward_eval(expr: Callable[..., Tensor], *args, **kwargs) -> Tensor:
    """Evaluate an expression builder on bound inputs.

    Inputs may be arrays, tensors or ParamSets; ParamSets are passed through
    unchanged for the builder to index. Shape problems surface as ShapeError.
    """
    out = expr(*args, **kwargs)
    if not isinstance(out, Tensor):
        out = as_tensor(out)
    return out


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class ParamSet(Mapping):
    """Named float64 arrays, each tagged with a group (body, head or graph).

    Treat as immutable: every update returns a new ParamSet.
    """

    values: dict[str, np.ndarray]
    groups: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.values) != set(self.groups):
            raise ValueError("every parameter needs exactly one group tag")
        bad = {g for g in self.groups.values() if g not in GROUPS}
        if bad:
            raise ValueError(f"unknown group tags {sorted(bad)}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def names(self, groups: Iterable[str] = GROUPS) -> list[str]:
        groups = set(groups)
        return [n for n in self.values if self.groups[n] in groups]

    def track(self, groups: Iterable[str] = GROUPS) -> dict[str, Tensor]:
        """Tensors for every parameter; those in ``groups`` are differentiable leaves."""
        groups = set(groups)
        return {n: (leaf(v, name=n) if self.groups[n] in groups else Tensor(v, name=n))
                for n, v in self.values.items()}

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        values = dict(self.values)
        for n, v in updates.items():
            if n not in values:
                raise KeyError(n)
            values[n] = v
        return ParamSet(values, dict(self.groups))

    def compatible(self, other: "ParamSet") -> bool:
        return (set(self.values) == set(other.values)
                and all(self.values[n].shape == other.values[n].shape for n in self.values))

    def equal(self, other: "ParamSet", groups: Iterable[str] = GROUPS) -> bool:
        """Bitwise equality over the selected groups."""
        if not self.compatible(other):
            return False
        return all(self.values[n].tobytes() == np.asarray(other.values[n], np.float64).tobytes()
                   for n in self.names(groups))


def apply_sgd(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float,
              groups: Iterable[str]) -> ParamSet:
    """One plain SGD step on the parameters whose group is in ``groups``."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    updates = {}
    for name in params.names(groups):
        if lr == 0:
            if name not in grads:
                raise KeyError(f"missing gradient for {name}")
            continue
        if name not in grads:
            raise KeyError(f"missing gradient for {name}")
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeError("apply_sgd", params[name].shape, g.shape)
        updates[name] = params[name] - lr * g
    return params.replace(updates)
