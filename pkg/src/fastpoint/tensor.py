"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every primitive here takes and returns :class:`Tensor` objects. When a
:class:`Tape` is active on the current thread and at least one input requires
a gradient, the primitive records a node holding a closure that maps the
upstream gradient to gradients for its inputs. ``Tape.backward`` replays those
nodes in exact reverse execution order and accumulates into the ``grad`` slot
of leaf tensors (parameters included).

Storage defaults to float32. ``with precision(np.float64):`` switches newly
created tensors to float64, which is what gradient verification uses.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import scipy.sparse as sp

BN_EPS = 1e-5

_local = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True

    @property
    def shape(self) -> tuple:
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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class Parameter(Tensor):
    """A named learnable leaf tensor with a gradient slot of the same shape."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> None:
        """Convert value and gradient storage in place."""
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


class Tape:
    """Ordered record of executed primitives on one thread.

    Use as a context manager; operations executed inside the ``with`` block on
    the same thread are recorded.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, out: Tensor, inputs: tuple, backward, op: str) -> None:
        self.nodes.append(_Node(out, inputs, backward, op))

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if loss.data.size != 1:
                raise DimensionError(f"backward needs a scalar loss or explicit grad, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): grad}
        if loss.is_leaf:
            _accumulate_leaf(loss, grad)
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    _accumulate_leaf(inp, gi)
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


# Branch recording: nondifferentiable choices (ReLU masks, argmax routes) made
# during a forward pass. Gradient checking uses this to detect kink crossings.

@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    prev = getattr(_local, "branches", None)
    log: list = []
    _local.branches = log
    try:
        yield log
    finally:
        _local.branches = prev


def _log_branch(arr: np.ndarray) -> None:
    log = getattr(_local, "branches", None)
    if log is not None:
        log.append(arr.copy())


check_finite = True


def _result(data: np.ndarray, inputs: tuple, backward, op: str) -> Tensor:
    if check_finite and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.is_leaf = False
    tape = active_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape.record(out, inputs, backward, op)
    return out


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    """max(0, x); the gradient at exactly zero is zero."""
    out = np.maximum(x.data, 0)
    if getattr(_local, "branches", None) is not None:
        _log_branch(x.data > 0)
    return _result(out, (x,), lambda g: (g * (out > 0),), "relu")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _result(np.asarray(x.data.mean()), (x,),
                   lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice) indexing."""
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        out[key] = g
        return (out,)

    return _result(np.ascontiguousarray(x.data[key]), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    datas = [t.data for t in tensors]
    ref = datas[0].shape
    ax = axis % len(ref)
    for d in datas[1:]:
        if d.ndim != len(ref) or any(d.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {[x.shape for x in datas]} on axis {axis}")
    bounds = np.cumsum([0] + [d.shape[ax] for d in datas])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(datas)))

    return _result(np.concatenate(datas, axis=ax), tensors, backward, "concat")


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(np.ascontiguousarray(np.broadcast_to(x.data, shape)), (x,),
                   lambda g: (_unbroadcast(g, old),), "broadcast_to")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., K] @ b[K, N]``; leading axes of ``a`` are treated as rows."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    k = ad.shape[-1]

    def backward(g):
        ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
    return _result(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# indexing over the point axis


def _flat_index(idx: np.ndarray, n: int) -> np.ndarray:
    b = idx.shape[0]
    offs = (np.arange(b, dtype=np.int64) * n).reshape((b,) + (1,) * (idx.ndim - 1))
    return (idx.astype(np.int64) + offs).ravel()


def _scatter_rows(rows: np.ndarray, flat: np.ndarray, n_out: int, weights=None) -> np.ndarray:
    """out[flat[i]] += weights[i] * rows[i] via a sparse product (faster than np.add.at)."""
    vals = np.ones(flat.size, dtype=rows.dtype) if weights is None else weights.astype(rows.dtype).ravel()
    s = sp.csr_matrix((vals, (flat, np.arange(flat.size))), shape=(n_out, flat.size))
    return np.asarray(s @ rows)


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch row gather: ``x[B, N, C]`` with ``idx[B, ...]`` -> ``[B, ..., C]``."""
    if x.ndim != 3:
        raise DimensionError(f"gather expects a [B, N, C] tensor, got {x.shape}")
    b, n, c = x.shape
    idx = np.asarray(idx)
    if idx.shape[0] != b:
        raise DimensionError(f"gather: batch mismatch between {x.shape} and index {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather: index out of range for {n} points")
    flat = _flat_index(idx, n)
    out = x.data.reshape(b * n, c)[flat].reshape(idx.shape + (c,))

    def backward(g):
        return (_scatter_rows(g.reshape(-1, c), flat, b * n).reshape(b, n, c),)

    return _result(out, (x,), backward, "gather")


def weighted_gather(x: Tensor, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """``out[b, t] = sum_j weights[b, t, j] * x[b, idx[b, t, j]]``.

    The weights are constants (no gradient flows to them).
    """
    b, n, c = x.shape
    flat = _flat_index(idx, n)
    w = np.asarray(weights, dtype=x.dtype)
    picked = x.data.reshape(b * n, c)[flat].reshape(idx.shape + (c,))
    out = np.einsum("...j,...jc->...c", w, picked)

    def backward(g):
        rows = np.broadcast_to(g[..., None, :], idx.shape + (c,)).reshape(-1, c)
        return (_scatter_rows(rows, flat, b * n, weights=w).reshape(b, n, c),)

    return _result(out, (x,), backward, "weighted_gather")


def max_over(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; gradient goes to the first argmax on ties."""
    ax = axis % x.ndim
    arg = np.argmax(x.data, axis=ax)
    _log_branch(arg)
    arg_k = np.expand_dims(arg, ax)
    out = np.take_along_axis(x.data, arg_k, axis=ax).squeeze(ax)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, arg_k, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _result(out, (x,), backward, "max")


# ---------------------------------------------------------------------------
# normalization, regularization, loss


@dataclass
class BatchNormState:
    """Moving statistics for one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    decay: float = 0.7

    @classmethod
    def fresh(cls, channels: int, decay: float = 0.7, dtype=None) -> "BatchNormState":
        dtype = dtype or default_dtype()
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), decay)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, update_stats: bool = True) -> Tensor:
    """Normalize each channel (last axis) over all other axes.

    In training mode batch statistics are used and, when ``update_stats``,
    folded into ``state`` as ``m <- decay*m + (1-decay)*batch``.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.mean.shape != (c,):
        raise DimensionError(f"batch_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    if not 0.0 < state.decay < 1.0:
        raise ValueError(f"batch_norm decay must lie in (0, 1), got {state.decay}")
    xd = x.data.reshape(-1, c)
    gd, bd = gamma.data, beta.data
    rows = xd.shape[0]
    if training:
        mu = xd.mean(axis=0)
        xc = xd - mu
        var = np.einsum("ij,ij->j", xc, xc) / rows
        if update_stats:
            d = state.decay
            state.mean = (d * state.mean + (1 - d) * mu).astype(state.mean.dtype)
            state.var = (d * state.var + (1 - d) * var).astype(state.var.dtype)
    else:
        xc = xd - state.mean.astype(xd.dtype)
        var = state.var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + BN_EPS)).astype(xd.dtype)
    out = xc * (gd * inv)
    out += bd
    out = out.reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, c)
        xhat = xc * inv
        dgamma = np.einsum("ij,ij->j", g2, xhat)
        dbeta = g2.sum(axis=0)
        if training:
            dx = xhat * (-(gd * inv / rows) * dgamma)
            dx += g2 * (gd * inv)
            dx -= (gd * inv / rows) * dbeta
        else:
            dx = g2 * (gd * inv)
        return dx.reshape(x.shape), dgamma, dbeta

    return _result(out, (x, gamma, beta), backward, "batch_norm")


def dropout(x: Tensor, keep_prob: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity in inference mode or when ``keep_prob == 1``."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / x.dtype.type(keep_prob)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``; leading axes are rows."""
    c = logits.shape[-1]
    z = logits.data.reshape(-1, c)
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != z.shape[0]:
        raise DimensionError(f"softmax_cross_entropy: {z.shape[0]} rows but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    y = y.astype(np.int64)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = (lse - shifted[rows, y]).mean()

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, y] -= 1.0
        return ((p * (g / z.shape[0])).astype(logits.dtype).reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")
