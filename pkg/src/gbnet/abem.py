"""Attentional back-projection edge-feature module (ABEM).

Prominent branch::

    f_phi  = EdgeConv_phi(x)                  (N, k, d')
    x'     = LFC_gamma(f_phi)                 (N, d)   back-projection
    dx     = x' - x                           error signal
    f_ups  = EdgeConv_upsilon(dx)             same neighborhoods as x
    f_M    = CAA(max_k(f_phi + f_ups))

Fine-grained branch: ``f_A = CAA(EdgeLFC_theta(x))``.  The module emits
``concat(f_M, f_A)`` and hands ``f_M`` to the next layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import CaaLayer, caa_forward
from .geometry import NeighborIndex, knn_search
from .layers import LfcLayer, MlpLayer, Module, edgeconv_forward, edgelfc_forward, lfc_forward
from .tensor import Tensor, as_tensor, concat_axis, reduce_max, sub

BRANCHES = ("both", "prominent", "finegrained", "none")


class AbemLayer(Module):
    """``branches`` selects the ablation: both (full module), prominent or
    finegrained only, or none (a plain EdgeConv + max block)."""

    def __init__(
        self,
        d: int,
        d_out: int,
        k: int,
        num_points: int,
        rng: np.random.Generator,
        ratio: int = 4,
        slope: float = 0.2,
        branches: str = "both",
        dtype=np.float32,
    ):
        if branches not in BRANCHES:
            raise ValueError(f"branches must be one of {BRANCHES}, got {branches!r}")
        self.d, self.d_out, self.k, self.branches = d, d_out, k, branches
        self.edgeconv_phi = self.lfc_gamma = self.edgeconv_upsilon = self.caa_m = None
        self.edgelfc_theta = self.caa_a = None
        self.edgeconv = None
        if branches in ("both", "prominent"):
            self.edgeconv_phi = MlpLayer(2 * d, d_out, rng, slope=slope, dtype=dtype)
            self.lfc_gamma = LfcLayer(d_out, d, k, rng, slope=slope, dtype=dtype)
            self.edgeconv_upsilon = MlpLayer(2 * d, d_out, rng, slope=slope, dtype=dtype)
            self.caa_m = CaaLayer(num_points, rng, ratio, slope, dtype)
        if branches in ("both", "finegrained"):
            self.edgelfc_theta = LfcLayer(2 * d, d_out, k, rng, slope=slope, dtype=dtype)
            self.caa_a = CaaLayer(num_points, rng, ratio, slope, dtype)
        if branches == "none":
            self.edgeconv = MlpLayer(2 * d, d_out, rng, slope=slope, dtype=dtype)

    @property
    def out_width(self) -> int:
        return 2 * self.d_out if self.branches == "both" else self.d_out


@dataclass
class AbemState:
    nbr: NeighborIndex
    f_phi: np.ndarray | None = None
    x_restored: np.ndarray | None = None
    delta_x: np.ndarray | None = None
    f_upsilon: np.ndarray | None = None
    f_M: np.ndarray | None = None
    f_A: np.ndarray | None = None
    f_out: np.ndarray | None = None


def prominent_encode(layer: AbemLayer, x, nbr: NeighborIndex, state: AbemState | None = None) -> Tensor:
    x = as_tensor(x)
    f_phi = edgeconv_forward(layer.edgeconv_phi, x, nbr)
    x_restored = lfc_forward(layer.lfc_gamma, f_phi)
    delta_x = sub(x_restored, x)
    f_upsilon = edgeconv_forward(layer.edgeconv_upsilon, delta_x, nbr)
    pooled, _ = reduce_max(f_phi + f_upsilon, axis=-2)
    f_M = caa_forward(layer.caa_m, pooled)
    if state is not None:
        state.f_phi, state.x_restored, state.delta_x = f_phi.data, x_restored.data, delta_x.data
        state.f_upsilon, state.f_M = f_upsilon.data, f_M.data
    return f_M


def finegrained_encode(layer: AbemLayer, x, nbr: NeighborIndex, state: AbemState | None = None) -> Tensor:
    f_A = caa_forward(layer.caa_a, edgelfc_forward(layer.edgelfc_theta, x, nbr))
    if state is not None:
        state.f_A = f_A.data
    return f_A


def abem_forward(layer: AbemLayer, x, graph_source=None, return_state: bool = False):
    """Run one ABEM.  Returns ``(f_out, f_next)`` or ``(f_out, f_next, state)``.

    The kNN graph is built once, from ``graph_source`` when given (3-D
    coordinates for the first layer) and from ``x`` otherwise, and shared
    by every edge construction inside the module.
    """
    x = as_tensor(x)
    n = x.shape[-2]
    if n <= layer.k:
        raise ValueError(f"ABEM needs N > k (N={n}, k={layer.k})")
    space = "feature" if graph_source is None else "coordinate"
    nbr = knn_search(x.data if graph_source is None else graph_source, layer.k, space)
    state = AbemState(nbr) if return_state else None

    if layer.branches == "none":
        pooled, _ = reduce_max(edgeconv_forward(layer.edgeconv, x, nbr), axis=-2)
        f_out = f_next = pooled
    elif layer.branches == "prominent":
        f_out = f_next = prominent_encode(layer, x, nbr, state)
    elif layer.branches == "finegrained":
        f_out = f_next = finegrained_encode(layer, x, nbr, state)
    else:
        f_M = prominent_encode(layer, x, nbr, state)
        f_A = finegrained_encode(layer, x, nbr, state)
        f_out = concat_axis([f_M, f_A], axis=-1)
        f_next = f_M
    if state is not None:
        state.f_out = f_out.data
        return f_out, f_next, state
    return f_out, f_next
