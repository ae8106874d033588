"""Reverse-mode differentiation over numpy arrays.

Deliberately minimal: only the operations the two-branch labeler needs carry
gradients. Graphs are built eagerly; `backward` walks the tape once and
returns gradients for the requested tensors.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import nn_core
from .rng import stream_generator

ArrayLike = "np.ndarray | float | int"


class Tensor:
    __slots__ = ("data", "parents", "bwd", "requires_grad", "grad")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        bwd: Callable[[np.ndarray], tuple] | None = None,
        requires_grad: bool = False,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.bwd = bwd
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor(out, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return Tensor(out, (a, b), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return Tensor(out, (x,), bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return Tensor(x.data.transpose(axes), (x,), bwd)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, x.data.shape).copy(),)

    return Tensor(out, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = nn_core.gelu(x.data)

    def bwd(g):
        v = x.data
        u = nn_core._GELU_C * (v + 0.044715 * v**3)
        t = np.tanh(u)
        du = nn_core._GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * du),)

    return Tensor(out, (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    y = nn_core.softmax(x.data, axis=axis)

    def bwd(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return Tensor(y, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    y = nn_core.log_softmax(x.data, axis=axis)

    def bwd(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return Tensor(y, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std
    out = gain.data * xhat + bias.data

    def bwd(g):
        dgain = _unbroadcast(g * xhat, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        dxhat = g * gain.data
        dx = (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) / std
        return dx, dgain, dbias

    return Tensor(out, (x, gain, bias), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids)
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return Tensor(out, (table,), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no generator is supplied."""
    if rate <= 0.0 or rng is None:
        return as_tensor(x)
    return mul(x, nn_core.dropout_mask(np.shape(as_tensor(x).data), rate, rng))


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(np.array(as_tensor(x).data, copy=True))


def backward(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar loss for each tensor in `wrt` (zeros when the
    tensor does not reach the loss)."""
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node.bwd is None:
            continue
        for p, pg in zip(node.parents, node.bwd(g)):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg

    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def grad_check(
    loss_fn: Callable[[], Tensor],
    params,
    h: float = 1e-5,
    tolerance: float | None = None,
    samples_per_tensor: int = 4,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central differences.

    Samples coordinates from every parameter tensor. The relative error uses
    a 1e-3 denominator floor so float64 difference noise on near-zero
    gradients does not register as disagreement.
    """
    loss0 = loss_fn()
    if not np.isfinite(loss0.data):
        raise ValueError("loss is not finite")
    analytic = backward(loss0, wrt=params.tensors())

    max_err = 0.0
    for (name, p), ga in zip(params.items(), analytic):
        size = p.data.size
        k = min(samples_per_tensor, size)
        idx = stream_generator(seed, f"grad_check/{name}").choice(
            size, size=k, replace=False
        )
        flat = p.data.reshape(-1)
        ga_flat = ga.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_fn().data)
            flat[i] = orig - h
            lm = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ValueError("loss is not finite during finite differences")
            fd = (lp - lm) / (2.0 * h)
            a = float(ga_flat[i])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
            max_err = max(max_err, err)
    if tolerance is not None and max_err > tolerance:
        raise ValueError(f"gradient check failed: {max_err:.3e} > {tolerance:.3e}")
    return max_err
