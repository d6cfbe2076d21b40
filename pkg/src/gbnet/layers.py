"""Learnable layers: shared MLP (1x1), local fully-connected (1xk),
EdgeConv and EdgeLFC, all with batch norm and a leaky rectifier."""

from __future__ import annotations

import math
import warnings
from typing import Iterator

import numpy as np

from .geometry import NeighborIndex, build_edge_features
from .tensor import (
    Parameter,
    Tensor,
    as_tensor,
    batch_norm_act,
    edge_sum,
    gather_neighbors,
    leaky_relu,
    linear,
    reduce_sum,
    sub,
    transpose,
)

ACTIVATIONS = {"leaky_relu": 0.2, "relu": 0.0, "identity": 1.0}


class Module:
    """Container that discovers parameters, buffers and children by attribute."""

    training = True
    _buffers: tuple[str, ...] = ()

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                value.name = full
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name in m._buffers:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.data for n, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        for m_prefix, m in self._named_modules():
            for name in m._buffers:
                full = f"{m_prefix}{name}"
                old = getattr(m, name)
                arr = np.asarray(state[full])
                if arr.shape != old.shape:
                    raise ValueError(f"{full}: shape {arr.shape} does not match {old.shape}")
                setattr(m, name, arr.astype(old.dtype, copy=True))

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value._named_modules(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float, dtype) -> np.ndarray:
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype))
        self.beta = Parameter(np.zeros(channels, dtype))
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm_forward(bn: BatchNorm, x, slope: float = 1.0) -> Tensor:
    """Normalize over all non-channel positions, then y = gamma * xhat + beta.

    A single position per channel cannot supply batch statistics; the
    running statistics are used instead, with a warning.
    """
    x = as_tensor(x)
    training = bn.training
    if training and x.size // x.shape[-1] < 2:
        warnings.warn("batch norm over a single position: using running statistics", RuntimeWarning, stacklevel=2)
        training = False
    return batch_norm_act(
        x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, training, bn.momentum, bn.eps, slope
    )


class MlpLayer(Module):
    """Shared per-position affine map + batch norm + activation."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        rng: np.random.Generator,
        bn: bool = True,
        slope: float = 0.2,
        bias: bool = True,
        dtype=np.float32,
    ):
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in), c_in, slope, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype)) if bias else None
        self.bn = BatchNorm(c_out, dtype=dtype) if bn else None
        self.slope = slope

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]


def _finish(layer, y: Tensor) -> Tensor:
    if layer.bn is not None:
        return batchnorm_forward(layer.bn, y, layer.slope)
    if layer.slope != 1.0:
        return leaky_relu(y, layer.slope)
    return y


def mlp_forward(layer: MlpLayer, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != layer.c_in:
        raise ValueError(f"MLP expects {layer.c_in} input channels, got {x.shape[-1]}")
    return _finish(layer, linear(x, layer.weight, layer.bias))


class LfcLayer(Module):
    """1 x k convolution over an ordered neighborhood: (…, k, C_in) -> (…, C_out)."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int,
        rng: np.random.Generator,
        bn: bool = True,
        slope: float = 0.2,
        bias: bool = True,
        dtype=np.float32,
    ):
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, k), c_in * k, slope, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype)) if bias else None
        self.bn = BatchNorm(c_out, dtype=dtype) if bn else None
        self.slope = slope

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def k(self) -> int:
        return self.weight.shape[2]


def lfc_forward(layer: LfcLayer, x) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] != layer.k:
        raise ValueError(f"LFC expects {layer.k} neighbor slots, got shape {x.shape}")
    if x.shape[-1] != layer.c_in:
        raise ValueError(f"LFC expects {layer.c_in} input channels, got {x.shape[-1]}")
    # flatten (slot, channel) pairs so one matmul does the 1 x k convolution
    w = transpose(layer.weight, (0, 2, 1)).reshape(layer.c_out, layer.k * layer.c_in)
    xf = x.reshape(*x.shape[:-2], layer.k * layer.c_in)
    return _finish(layer, linear(xf, w, layer.bias))


def _batched_input(x, nbr: NeighborIndex):
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    idx = nbr.indices[None] if nbr.indices.ndim == 2 else nbr.indices
    if idx.shape[:2] != x.shape[:2]:
        raise ValueError(f"neighbor index {idx.shape} does not match features {x.shape}")
    return x, idx, squeeze


def edgeconv_forward(layer: MlpLayer, x, nbr: NeighborIndex) -> Tensor:
    """MLP over [x_i, x_j - x_i] for each neighbor; keeps the k axis.

    Splitting the weight as [W_c | W_e] gives W_c x_i + W_e (x_j - x_i)
    = (W_c - W_e) x_i + W_e x_j, so both matmuls run per point instead of
    per edge.
    """
    x, idx, squeeze = _batched_input(x, nbr)
    d = x.shape[-1]
    if layer.c_in != 2 * d:
        raise ValueError(f"EdgeConv expects {layer.c_in // 2}-dim features, got {d}")
    w_c = layer.weight[:, :d]
    w_e = layer.weight[:, d:]
    center = linear(x, sub(w_c, w_e), layer.bias)
    neighbor = linear(x, w_e)
    out = _finish(layer, edge_sum(center, neighbor, idx))
    return out.reshape(*out.shape[1:]) if squeeze else out


def edgeconv_reference(layer: MlpLayer, x, nbr: NeighborIndex) -> Tensor:
    """Literal composition mlp(edge_features(x)); slower, used as a cross-check."""
    return mlp_forward(layer, build_edge_features(x, nbr))


def edgelfc_forward(layer: LfcLayer, x, nbr: NeighborIndex) -> Tensor:
    """LFC over the edge features of each neighborhood: (…, N, d) -> (…, N, C_out)."""
    x, idx, squeeze = _batched_input(x, nbr)
    B, N, d = x.shape
    if layer.c_in != 2 * d:
        raise ValueError(f"EdgeLFC expects {layer.c_in // 2}-dim features, got {d}")
    if layer.k != idx.shape[2]:
        raise ValueError(f"EdgeLFC has k={layer.k}, neighbor index has k={idx.shape[2]}")
    k = layer.k
    w_c = layer.weight[:, :d, :]
    w_e = layer.weight[:, d:, :]
    w_center = reduce_sum(sub(w_c, w_e), axis=2)
    w_nbr = transpose(w_e, (0, 2, 1)).reshape(layer.c_out, k * d)
    nb = gather_neighbors(x, idx).reshape(B, N, k * d)
    y = linear(x, w_center, layer.bias) + linear(nb, w_nbr)
    out = _finish(layer, y)
    return out.reshape(*out.shape[1:]) if squeeze else out


def edgelfc_reference(layer: LfcLayer, x, nbr: NeighborIndex) -> Tensor:
    return lfc_forward(layer, build_edge_features(x, nbr))
