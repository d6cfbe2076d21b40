"""Dense tensors with a recorded tape and reverse-mode gradients.

Only the primitives the network actually needs are provided.  Ops record
onto the innermost active :class:`Tape`; outside a tape nothing is recorded
and forward passes carry no autodiff overhead::

    with Tape() as tape:
        loss = (w * x).sum()
    backward(loss)
    w.grad
"""

from __future__ import annotations

import itertools
import os
import threading
from collections import namedtuple
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K

_ids = itertools.count()
_local = threading.local()
_DEBUG = os.environ.get("GBNET_DEBUG", "0") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Toggle NaN/Inf checks after every primitive."""
    global _DEBUG
    _DEBUG = bool(flag)


def _tape_stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


# -- discrete-decision log, used by grad_check to spot kinks ----------------


@contextmanager
def record_decisions():
    """Collect the discrete choices (argmax, rectifier masks, neighbor
    indices, point orderings) made by ops inside the block."""
    prev = getattr(_local, "decisions", None)
    log: list[np.ndarray] = []
    _local.decisions = log
    try:
        yield log
    finally:
        _local.decisions = prev


def log_decision(arr: np.ndarray) -> None:
    log = getattr(_local, "decisions", None)
    if log is not None:
        log.append(np.array(arr, copy=True))


class Tensor:
    """Real-valued array node.  ``grad`` is filled on leaves by backward."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self.tape: Tape | None = None

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Parameter(Tensor):
    """Learnable tensor; ``name`` is its dotted path inside a model."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


Op = namedtuple("Op", "name out_id out_shape in_ids backward")


class Tape:
    """Ordered record of executed primitives.

    Records keep only node ids and the closures' saved arrays, so
    intermediate tensors are freed as soon as user code drops them.
    """

    def __init__(self):
        self.records: list[Op] = []
        self.leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def clear(self) -> None:
        self.records.clear()
        self.leaves.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for op in reversed(self.records):
            g = grads.pop(op.out_id, None)
            if g is None:
                continue
            in_grads = op.backward(g)
            for nid, gi in zip(op.in_ids, in_grads):
                if nid is None or gi is None:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + gi
                else:
                    grads[nid] = gi
        for nid, leaf in self.leaves.items():
            g = grads.get(nid)
            if g is None:
                continue
            g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar ``loss`` into leaf ``.grad``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise ValueError("loss has no recorded graph (was it computed inside a Tape?)")
    loss.tape.backward(loss)


def _make(name: str, out: np.ndarray, inputs: Sequence[Tensor], bwd: Callable) -> Tensor:
    if _DEBUG and out.dtype.kind == "f" and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite output from {name}")
    t = Tensor(out)
    tape = active_tape()
    if tape is None or not any(x.requires_grad for x in inputs):
        return t
    t.requires_grad = True
    t.tape = tape
    in_ids = []
    for x in inputs:
        if x.requires_grad:
            in_ids.append(x.node_id)
            if x.tape is None:
                tape.leaves[x.node_id] = x
        else:
            in_ids.append(None)
    tape.records.append(Op(name, t.node_id, out.shape, tuple(in_ids), bwd))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars take the dtype of the tensor operand
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else None))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", ad * bd, (a, b), bwd)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    log_decision(mask)
    s = x.dtype.type(slope)
    return _make("leaky_relu", np.where(mask, x.data, s * x.data), (x,), lambda g: (np.where(mask, g, s * g),))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make("broadcast_to", np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


def index(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing."""
    shape, dt = x.shape, x.dtype

    def bwd(g):
        out = np.zeros(shape, dt)
        out[key] = g
        return (out,)

    return _make("index", np.array(x.data[key], copy=True), (x,), bwd)


def concat_axis(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    nd = tensors[0].ndim
    ax = _norm_axis(axis, nd)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ValueError(f"concat: shapes {ref} and {t.shape} differ outside axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bwd(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bwd)


def permute_points(x: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder axis 1 of a (B, N, ...) tensor by per-batch permutations (B, N)."""
    log_decision(perm)
    inv = np.argsort(perm, axis=1)
    b = np.arange(x.shape[0])[:, None]
    return _make("permute_points", x.data[b, perm], (x,), lambda g: (g[b, inv],))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors, or batched over matching leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., C_in] @ w.T + b with w of shape (C_out, C_in)."""
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: input has {x.shape[-1]} channels, weight expects {w.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = w.data
    out = x2 @ wd.T
    if b is not None:
        out += b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(lead + (wd.shape[1],)) if x.requires_grad else None
        gw = g2.T @ x2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make("linear", out.reshape(lead + (wd.shape[0],)), inputs, bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(out), (x,), bwd)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[_norm_axis(a, x.ndim)] for a in axes]))
    if n == 0:
        raise ValueError("mean over an empty axis")
    shape = x.shape
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean", np.asarray(out, dtype=x.dtype), (x,), bwd)


def reduce_max(x: Tensor, axis: int = -1, keepdims: bool = False) -> tuple[Tensor, np.ndarray]:
    """Max over one axis; gradient routed to the argmax (lowest index on ties)."""
    ax = _norm_axis(axis, x.ndim)
    n = x.shape[ax]
    if n == 0:
        raise ValueError("max over an empty axis")
    if x.ndim == 4 and ax == 2 and not keepdims:
        vals, arg = K.max_over_neighbors(x.data)
        log_decision(arg)
        return _make("max_k", vals, (x,), lambda g: (K.route_max_grad(g, arg, n),)), arg
    arg = np.argmax(x.data, axis=ax)
    log_decision(arg)
    argk = np.expand_dims(arg, ax)
    vals = np.take_along_axis(x.data, argk, axis=ax)
    shape, dt = x.shape, x.dtype

    def bwd(g):
        out = np.zeros(shape, dt)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(out, argk, gk, axis=ax)
        return (out,)

    return _make("max", vals if keepdims else np.squeeze(vals, ax), (x,), bwd), arg


def softmax_axis(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _make("softmax", s, (x,), bwd)


# ---------------------------------------------------------------------------
# graph features
# ---------------------------------------------------------------------------


def gather_neighbors(x: Tensor, idx: np.ndarray) -> Tensor:
    """(B, N, C) -> (B, M, k, C) with out[b, i, j] = x[b, idx[b, i, j]]."""
    _check_idx(idx, x.shape[1])
    n = x.shape[1]
    return _make("gather", K.gather(x.data, idx), (x,), lambda g: (K.scatter_add(g, idx, n),))


def edge_sum(center: Tensor, nbr: Tensor, idx: np.ndarray) -> Tensor:
    """out[b, i, j] = center[b, i] + nbr[b, idx[b, i, j]]  -> (B, N, k, C)."""
    _check_idx(idx, nbr.shape[1])
    n = nbr.shape[1]

    def bwd(g):
        gc = g.sum(axis=2) if center.requires_grad else None
        gn = K.scatter_add(g, idx, n) if nbr.requires_grad else None
        return gc, gn

    return _make("edge_sum", K.edge_sum(center.data, nbr.data, idx), (center, nbr), bwd)


def _check_idx(idx: np.ndarray, n: int) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"neighbor index out of range [0, {n})")


# ---------------------------------------------------------------------------
# normalization, regularization, loss
# ---------------------------------------------------------------------------


def batch_norm_act(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    slope: float = 1.0,
) -> Tensor:
    """Batch norm over every axis but the last, then a leaky rectifier
    (``slope=1`` is the identity, ``slope=0`` a plain ReLU).

    In training mode the running statistics are updated in place.
    """
    C = x.shape[-1]
    if gamma.shape != (C,):
        raise ValueError(f"batch norm: {C} channels, gamma has shape {gamma.shape}")
    x2 = x.data.reshape(-1, C)
    M = x2.shape[0]
    if training and M > 1:
        mean, var = K.moments(x2)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (M / (M - 1))
    else:
        training = False
        mean, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    gd, bd = gamma.data, beta.data
    xhat, out = K.bn_act_forward(x2, mean, inv, gd, bd, slope)
    if slope != 1.0:
        log_decision(out > 0)
    shape = x.shape

    def bwd(g):
        dx, dgamma, dbeta = K.bn_act_backward(g.reshape(-1, C), xhat, gd, bd, slope, inv, training)
        return dx.reshape(shape), dgamma, dbeta

    return _make("batch_norm", out.reshape(shape), (x, gamma, beta), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    B, c = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(B), labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (p * (g / B),)

    return _make("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bwd)
