"""Minimal reverse-mode autodiff over numpy arrays.

Only the layer vocabulary the model needs is provided: same-padded 1-D
convolution, dense layers, batch normalisation, a handful of pointwise
functions and the reductions used by the loss.  Every op works on a leading
batch axis so a whole minibatch flows through one tape.

Tensors are float32 by default.  ``float64_mode()`` switches the default
dtype for newly created tensors, which is what the gradient checks use.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ContractError",
    "DomainError",
    "NonFiniteError",
    "BatchNormState",
    "float64_mode",
    "default_dtype",
    "tape",
    "backward",
    "conv1d",
    "dense",
    "batchnorm",
    "pointwise",
    "relu",
    "tanh",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "log_sum_exp",
    "clamp",
    "square",
    "concat",
    "gather_rows",
]


class ContractError(ValueError):
    """Shape or argument contract violated by the caller."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an op (e.g. log of 0)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_dtype = np.float32
_check_finite = True


def default_dtype():
    return _dtype


@contextlib.contextmanager
def float64_mode():
    """Create new tensors in float64 inside the block (gradient checking)."""
    global _dtype
    prev, _dtype = _dtype, np.float64
    try:
        yield
    finally:
        _dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    # keep numpy from hijacking reflected operators
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return _add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -_lift(other, self))

    def __rsub__(self, other):
        return _add(_lift(other, self), -self)

    def __mul__(self, other):
        return _mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return _mul(self, _reciprocal(other))
        return _mul(self, _lift(1.0 / np.asarray(other), self))

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return _sum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    def __getitem__(self, idx) -> "Tensor":
        src_shape, dt = self.shape, self.dtype

        def bw(g):
            out = np.zeros(src_shape, dtype=dt)
            np.add.at(out, idx, g)
            return (out,)

        return _make(self.data[idx], (self,), bw, "index")


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], bw: Callable, op: str) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bw
    out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul")


def _reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise DomainError("division by zero")
    r = 1.0 / a.data
    return _make(r, (a,), lambda g: (-g * r * r,), "reciprocal")


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _make(np.asarray(out), (a,), bw, "sum")


# ------------------------------------------------------------------ backward
def tape(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` in topological order (inputs first).

    Walking this list backwards visits every node after all of its
    consumers, which is what adjoint accumulation needs.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Back-propagate a scalar loss.

    Returns a map from every ``requires_grad`` leaf reachable from ``loss``
    to its gradient.  If ``params`` is given, each of them gets an entry
    (zeros when disconnected).  ``.grad`` on leaves is overwritten.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = node
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {leaf: leaf.grad for leaf in leaves.values()}
    if params is not None:
        for p in params:
            if p not in out:
                out[p] = np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------- pointwise
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2 * g * xd,), "square")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where the clip is active."""
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clamp")


def log_sum_exp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (x,), bw, "log_sum_exp")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    soft = np.exp(y)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw, "log_softmax")


_POINTWISE = {
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "log_sum_exp": log_sum_exp,
}


def pointwise(x: Tensor, kind: str, axis: int = -1) -> Tensor:
    """Dispatch by name; ``axis`` only matters for the reductions."""
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown pointwise kind {kind!r}") from None
    if kind in ("softmax", "log_softmax", "log_sum_exp"):
        return fn(x, axis=axis)
    return fn(x)


# ---------------------------------------------------------------- structure
def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw, "concat")


def gather_rows(table: Tensor, idx) -> Tensor:
    """``table[idx]`` for an integer index array, with scatter-add backward."""
    idx = np.asarray(idx, dtype=np.int64)
    shape, dt = table.shape, table.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dt)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.data[idx], (table,), bw, "gather_rows")


# -------------------------------------------------------------------- layers
def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x of shape (n,) or (B, n)."""
    if weight.ndim != 2 or bias.shape != (weight.shape[0],) or x.shape[-1] != weight.shape[1]:
        raise ContractError(f"dense: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        return (g @ wd, g2.T @ x2, g2.sum(axis=0))

    return _make(out, (x, weight, bias), bw, "dense")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 convolution with "same" zero padding.

    x is (C_in, T) or (B, C_in, T); weight (C_out, C_in, k) with k odd.
    Computed as cross-correlation, the deep-learning convention.
    """
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if weight.ndim != 3 or xd.ndim != 3:
        raise ContractError(f"conv1d: input {x.shape}, weight {weight.shape}")
    c_out, c_in, k = weight.shape
    if k % 2 == 0:
        raise ContractError("conv1d kernel size must be odd")
    if xd.shape[1] != c_in or bias.shape != (c_out,):
        raise ContractError(f"conv1d: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    b, _, t = xd.shape
    pad = k // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    # (B, C_in, T, k) -> (B*T, C_in*k)
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(b * t, c_in * k)
    wm = weight.data.reshape(c_out, c_in * k)
    out = (cols @ wm.T + bias.data).reshape(b, t, c_out).transpose(0, 2, 1)
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    def bw(g):
        g3 = g[None] if squeeze else g
        g2 = np.ascontiguousarray(g3.transpose(0, 2, 1)).reshape(b * t, c_out)
        dw = (g2.T @ cols).reshape(c_out, c_in, k)
        db = g2.sum(axis=0)
        dcols = (g2 @ wm).reshape(b, t, c_in, k)
        dxp = np.zeros((b, c_in, t + 2 * pad), dtype=g.dtype)
        for j in range(k):
            dxp[:, :, j : j + t] += dcols[:, :, :, j].transpose(0, 2, 1)
        dx = dxp[:, :, pad : pad + t]
        return (dx[0] if squeeze else dx, dw, db)

    return _make(out, (x, weight, bias), bw, "conv1d")


@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one layer."""

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    n_updates: int = field(default=0)

    @classmethod
    def create(cls, n_features: int, dtype=None) -> "BatchNormState":
        dtype = dtype or _dtype
        return cls(
            scale=Tensor(np.ones(n_features), requires_grad=True, dtype=dtype),
            shift=Tensor(np.zeros(n_features), requires_grad=True, dtype=dtype),
            running_mean=np.zeros(n_features, dtype=dtype),
            running_var=np.ones(n_features, dtype=dtype),
        )


def batchnorm(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Normalise per feature over batch (and time, for (B, C, T) input).

    Train mode uses batch statistics and updates the running averages;
    infer mode uses the running averages and leaves ``state`` untouched.
    """
    if x.ndim not in (2, 3):
        raise ContractError(f"batchnorm expects (B, C) or (B, C, T), got {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    if x.shape[1] != state.scale.shape[0]:
        raise ContractError(f"batchnorm: {x.shape[1]} features, state has {state.scale.shape[0]}")
    xd = x.data
    gamma = state.scale.data.reshape(bshape)
    beta = state.shift.data.reshape(bshape)

    if mode == "infer":
        inv_std = 1.0 / np.sqrt(state.running_var.reshape(bshape) + state.eps)
        xhat = (xd - state.running_mean.reshape(bshape)) * inv_std

        def bw_infer(g):
            return (g * gamma * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes))

        out = (gamma * xhat + beta).astype(xd.dtype)
        return _make(out, (x, state.scale, state.shift), bw_infer, "batchnorm")

    if mode != "train":
        raise ContractError(f"unknown batchnorm mode {mode!r}")
    if x.shape[0] < 2:
        raise ContractError("batchnorm in train mode needs a batch of at least 2")
    n = int(np.prod([xd.shape[a] for a in axes]))
    mu = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mu) * inv_std

    m = state.momentum
    unbiased = var.reshape(-1) * (n / (n - 1))
    state.running_mean[...] = m * state.running_mean + (1 - m) * mu.reshape(-1)
    state.running_var[...] = m * state.running_var + (1 - m) * unbiased
    state.n_updates += 1

    def bw(g):
        dxhat = g * gamma
        dx = inv_std / n * (
            n * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return (dx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    out = (gamma * xhat + beta).astype(xd.dtype)
    return _make(out, (x, state.scale, state.shift), bw, "batchnorm")
