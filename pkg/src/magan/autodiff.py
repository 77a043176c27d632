"""Minimal reverse-mode automatic differentiation over float64 arrays.

A :class:`Tensor` is both the value and the graph node that produced it.
Operations record their parents and a closure that maps the upstream
gradient to one gradient per parent; :func:`backward` walks the graph in
reverse topological order and sums gradients arriving over multiple paths.

Only what the networks in this package need is implemented: dense algebra,
a handful of elementwise functions, reductions, slicing/concatenation and
the two log-losses. The ADAM optimizer lives here as well since it is the
only consumer of the gradients.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, DomainError

DTYPE = np.float64

#: Clamp applied to discriminator outputs before taking logs.
LOG_EPS = 1e-7
# Sigmoid results are kept one ulp away from 0 and 1.
_SIG_LO = np.finfo(DTYPE).tiny
_SIG_HI = np.nextafter(1.0, 0.0)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense row-major float64 array that remembers how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward: BackwardFn | None = None,
        name: str | None = None,
    ):
        self.data = np.asarray(data, dtype=DTYPE, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward
        self.name = name

    @classmethod
    def parameter(cls, data, name: str | None = None) -> "Tensor":
        return cls(np.array(data, dtype=DTYPE, copy=True), requires_grad=True, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)
    return Tensor(data, op=op)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, "add", (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, "sub", (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, "mul", (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def grad_fn(g):
        return (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, "div", (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise ContractError("power: exponent must be a Python scalar")
    ad = a.data
    if exponent == 2:
        return square(a)
    return _result(ad**exponent, "pow", (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, "square", (a,), lambda g: (2.0 * g * ad,))


def matmul(a, b) -> Tensor:
    """Matrix product ``a @ b``.

    ``a`` may carry leading batch axes; ``b`` is then a single matrix shared
    by every batch entry, which is how stacked minibatches go through a
    dense layer.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    try:
        out = ad @ bd
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    return _result(out, "matmul", (a, b), grad_fn)


# ---------------------------------------------------------------------------
# elementwise functions


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """Elementwise ``max(x, slope * x)`` for ``0 < slope < 1``."""
    if not 0.0 < slope < 1.0:
        raise DomainError(f"leaky_relu: slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    xd = x.data
    pos = xd > 0
    out = np.where(pos, xd, slope * xd)
    return _result(out, "leaky_relu", (x,), lambda g: (np.where(pos, g, slope * g),))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = np.clip(expit(x.data), _SIG_LO, _SIG_HI)
    return _result(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(np.log(xd), "log", (x,), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, "exp", (x,), lambda g: (g * out,))


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _result(out, "sqrt", (x,), lambda g: (0.5 * g / out,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping was active."""
    x = as_tensor(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _result(np.clip(xd, lo, hi), "clip", (x,), lambda g: (g * inside,))


def dense(
    x,
    weights: Tensor,
    bias: Tensor,
    activation: str = "linear",
    slope: float = 0.2,
    scale: np.ndarray | None = None,
) -> Tensor:
    """Fused ``activation(x @ W + b) * scale`` as a single graph node.

    ``scale`` is an optional elementwise multiplier applied after the
    activation (a dropout mask). Equivalent to composing :func:`matmul`,
    :func:`add`, the activation and :func:`mul`, but with one node and
    fewer passes over memory.
    """
    x = as_tensor(x)
    if x.ndim < 2 or weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise DimensionError(f"dense: incompatible shapes {x.shape} and {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"dense: bias shape {bias.shape} for weights {weights.shape}")
    xd, wd = x.data, weights.data
    lead = xd.shape[:-1]
    n_in, n_out = wd.shape
    x2 = xd.reshape(-1, n_in)
    z = x2 @ wd
    z += bias.data
    factor = None
    if activation == "leaky_relu":
        if not 0.0 < slope < 1.0:
            raise DomainError(f"leaky_relu: slope must lie in (0, 1), got {slope}")
        # act(z) * scale == z * factor, and factor is also the local derivative
        factor = np.greater(z, 0.0).astype(DTYPE)
        factor *= 1.0 - slope
        factor += slope
        if scale is not None:
            factor *= scale.reshape(factor.shape)
        out = z * factor
    elif activation == "sigmoid":
        act = np.clip(expit(z), _SIG_LO, _SIG_HI)
        out = act if scale is None else act * scale.reshape(act.shape)
    elif activation == "linear":
        if scale is not None:
            factor = scale.reshape(z.shape)
            out = z * factor
        else:
            out = z
    else:
        raise ContractError(f"dense: unknown activation {activation!r}")

    def grad_fn(g):
        g = g.reshape(-1, n_out)
        if activation == "sigmoid":
            gz = g * act * (1.0 - act)
            if scale is not None:
                gz *= scale.reshape(gz.shape)
        elif factor is not None:
            gz = g * factor
        else:
            gz = g
        gx = (gz @ wd.T).reshape(lead + (n_in,)) if x.requires_grad else None
        gw = x2.T @ gz if weights.requires_grad else None
        gb = np.ones(len(gz)) @ gz if bias.requires_grad else None
        return gx, gw, gb

    out = out.reshape(lead + (n_out,))
    return _result(out, "dense", (x, weights, bias), grad_fn)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result(np.sum(x.data, axis=axes, keepdims=keepdims), "sum", (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)
    count = 1
    for a in axes:
        count *= shape[a]
    scale = 1.0 / count

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, shape),)

    return _result(np.mean(x.data, axis=axes, keepdims=keepdims), "mean", (x,), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"transpose: need at least 2 axes, got shape {x.shape}")
    return _result(np.swapaxes(x.data, -1, -2), "transpose", (x,), lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {old} to {tuple(shape)}") from None
    return _result(out, "broadcast_to", (x,), lambda g: (unbroadcast(g, old),))


def take(x: Tensor, index) -> Tensor:
    """Numpy-style indexing (basic or fancy) with scatter-add backward."""
    x = as_tensor(x)
    shape = x.shape
    try:
        out = x.data[index]
    except IndexError as exc:
        raise DimensionError(f"index {index!r} invalid for shape {shape}: {exc}") from None

    def grad_fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, dtype=DTYPE), "take", (x,), grad_fn)


def take_columns(x: Tensor, columns: Sequence[int]) -> Tensor:
    """Select columns (last axis) by integer index."""
    x = as_tensor(x)
    idx = np.asarray(columns, dtype=np.intp)
    n = x.shape[-1]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise DimensionError(f"take_columns: indices {list(idx)} out of range for {n} columns")
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, (..., idx), g)
        return (full,)

    return _result(x.data[..., idx], "take_columns", (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, "concat", tensors, grad_fn)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    tensors = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ: {sorted(shapes)}")
    out = np.stack([t.data for t in tensors])
    return _result(out, "stack", tensors, lambda g: tuple(g))


# ---------------------------------------------------------------------------
# losses


def mse(a, b) -> Tensor:
    """Mean over all elements of ``(a - b) ** 2``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    scale = 2.0 / diff.size if diff.size else 0.0

    def grad_fn(g):
        d = g * scale * diff
        return (d if a.requires_grad else None, -d if b.requires_grad else None)

    return _result(np.mean(diff * diff) if diff.size else np.float64(0.0), "mse", (a, b), grad_fn)


def _check_prob(name: str, d: Tensor) -> None:
    v = d.data
    # NaN passes through so the training loop can report the diverged term
    outside = (v < 0.0) | (v > 1.0)
    if np.any(outside):
        bad = v[outside]
        raise DomainError(f"{name}: discriminator outputs must lie in [0, 1], got {bad[:5]}")


def _bce(d_out, name: str, real: bool) -> Tensor:
    d_out = as_tensor(d_out)
    _check_prob(name, d_out)
    d = d_out.data
    inside = (d >= LOG_EPS) & (d <= 1.0 - LOG_EPS)
    c = np.clip(d, LOG_EPS, 1.0 - LOG_EPS)
    n = d.size
    if real:
        value = -np.mean(np.log(c))
        local = -1.0 / (n * c)
    else:
        value = -np.mean(np.log1p(-c))
        local = 1.0 / (n * (1.0 - c))
    return _result(np.float64(value), name, (d_out,), lambda g: (g * local * inside,))


def bce_real(d_out: Tensor) -> Tensor:
    """``-mean(log d)`` with ``d`` clamped to ``[LOG_EPS, 1 - LOG_EPS]``."""
    return _bce(d_out, "bce_real", True)


def bce_fake(d_out: Tensor) -> Tensor:
    """``-mean(log(1 - d))`` with the same clamp as :func:`bce_real`."""
    return _bce(d_out, "bce_fake", False)


def batch_moments(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-column mean and ``sqrt(var + eps)`` over the row axis (axis -2).

    Returns shape ``(..., 1, 2 * n_columns)`` with the means first.
    """
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise DimensionError(f"batch_moments: need a non-empty batch, got shape {x.shape}")
    xd = x.data
    b = xd.shape[-2]
    mu = xd.mean(axis=-2, keepdims=True)
    centered = xd - mu
    sd = np.sqrt((centered * centered).mean(axis=-2, keepdims=True) + eps)
    out = np.concatenate([mu, sd], axis=-1)
    n = xd.shape[-1]

    def grad_fn(g):
        g_mu, g_sd = g[..., :n], g[..., n:]
        return ((g_mu + centered * (g_sd / sd)) / b,)

    return _result(out, "batch_moments", (x,), grad_fn)


def append_broadcast(h: Tensor, v: Tensor) -> Tensor:
    """Concatenate ``v`` (shape ``(..., 1, k)``) onto every row of ``h``."""
    h, v = as_tensor(h), as_tensor(v)
    if v.ndim != h.ndim or v.shape[-2] != 1 or v.shape[:-2] != h.shape[:-2]:
        raise DimensionError(f"append_broadcast: cannot append {v.shape} to rows of {h.shape}")
    n = h.shape[-1]
    vb = np.broadcast_to(v.data, h.shape[:-1] + (v.shape[-1],))
    out = np.concatenate([h.data, vb], axis=-1)

    def grad_fn(g):
        return g[..., :n], g[..., n:].sum(axis=-2, keepdims=True)

    return _result(out, "append_broadcast", (h, v), grad_fn)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every node reachable from a scalar ``loss``.

    Leaf gradients accumulate across calls until cleared with
    :func:`zero_grad`; intermediate gradients are overwritten.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = pending.get(key)
            pending[key] = pg if prev is None else prev + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@contextlib.contextmanager
def frozen(params: Iterable[Tensor]) -> Iterator[None]:
    """Treat ``params`` as constants for graphs built inside the block."""
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


# ---------------------------------------------------------------------------
# ADAM


@dataclass
class AdamState:
    """Moment accumulators for one parameter group."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    skipped: int = field(default=0)

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kwargs,
        )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
) -> AdamState:
    """Bias-corrected ADAM update applied in place to ``params``.

    A step whose gradients contain NaN or Inf is skipped entirely and
    counted in ``state.skipped``. ``None`` gradients count as zero.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots"
        )
    for p, g, m in zip(params, grads, state.m):
        if m.shape != p.shape or (g is not None and g.shape != p.shape):
            raise DimensionError(f"adam_step: shape mismatch for parameter {p.name or p.shape}")
    if not all(g is None or _all_finite(g) for g in grads):
        state.skipped += 1
        return state

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    inv_sqrt_bc2 = 1.0 / math.sqrt(1.0 - b2**state.step)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        # lr * m_hat / (sqrt(v_hat) + eps), in place
        np.sqrt(v, out=tmp)
        tmp *= inv_sqrt_bc2
        tmp += state.epsilon
        np.divide(m, tmp, out=tmp)
        tmp *= lr / bc1
        p.data -= tmp
    return state


def _all_finite(g: np.ndarray) -> bool:
    # one reduction in the common case; overflow of the sum falls back to the full check
    with np.errstate(over="ignore", invalid="ignore"):
        total = g.sum()
    return bool(np.isfinite(total)) or bool(np.all(np.isfinite(g)))
