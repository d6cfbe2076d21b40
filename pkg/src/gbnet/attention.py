"""Channel-wise affinity attention.

Each channel of an (N, d) feature map is a vector over the N points.  Shared
MLPs compact those vectors to N' = N // ratio entries (queries and keys)
and map them N -> N (values); the d x d channel similarity S = Q^T K turns
into an affinity matrix that favours *dissimilar* channels, and the map is
refined residually: F' = F + alpha * V A.

The channel MLPs weight point positions individually, so points are first
put into a canonical order (lexicographic by feature row) and the values
are mapped back afterwards.  This keeps the block equivariant to the input
point order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import MlpLayer, Module, mlp_forward
from .tensor import (
    Parameter,
    Tensor,
    as_tensor,
    matmul,
    mul,
    permute_points,
    reduce_max,
    softmax_axis,
    sub,
    swapaxes,
)


class CaaLayer(Module):
    def __init__(
        self,
        num_points: int,
        rng: np.random.Generator,
        ratio: int = 4,
        slope: float = 0.2,
        dtype=np.float32,
    ):
        if ratio <= 1:
            raise ValueError(f"ratio must be > 1, got {ratio}")
        compact = num_points // ratio
        if compact < 1:
            raise ValueError(f"N={num_points} is smaller than ratio={ratio}")
        self.mlp_q = MlpLayer(num_points, compact, rng, slope=slope, dtype=dtype)
        self.mlp_k = MlpLayer(num_points, compact, rng, slope=slope, dtype=dtype)
        self.mlp_v = MlpLayer(num_points, num_points, rng, slope=slope, dtype=dtype)
        self.alpha = Parameter(np.zeros(1, dtype))
        self.ratio = ratio
        self.num_points = num_points

    @property
    def compact_points(self) -> int:
        return self.mlp_q.c_out


@dataclass
class AttentionState:
    Q: np.ndarray  # (B, N', d) in the layout of the feature map
    K: np.ndarray
    V: np.ndarray  # (B, N, d)
    S: np.ndarray  # (B, d, d)
    A: np.ndarray  # (B, d, d)
    alpha: float


def canonical_order(f: np.ndarray) -> np.ndarray:
    """Per-cloud permutation sorting the rows of (B, N, d) lexicographically."""
    B, N, _ = f.shape
    perm = np.empty((B, N), np.int64)
    for b in range(B):
        first = np.argsort(f[b, :, 0], kind="stable")
        col = f[b, first, 0]
        if np.any(col[1:] == col[:-1]):
            perm[b] = np.lexsort(f[b].T[::-1])
        else:
            perm[b] = first
    return perm


def _prepare(layer: CaaLayer, F) -> tuple[Tensor, bool]:
    F = as_tensor(F)
    squeeze = F.ndim == 2
    if squeeze:
        F = F.reshape(1, *F.shape)
    n = F.shape[1]
    if n < layer.ratio:
        raise ValueError(f"CAA needs N >= ratio ({n} < {layer.ratio})")
    if n != layer.num_points:
        raise ValueError(f"CAA built for N={layer.num_points}, got {n} points")
    return F, squeeze


def _channel_vectors(F: Tensor) -> tuple[Tensor, np.ndarray]:
    perm = canonical_order(F.data)
    return swapaxes(permute_points(F, perm), 1, 2), perm  # (B, d, N)


def ccc_compute(layer: CaaLayer, F) -> tuple[Tensor, Tensor, Tensor]:
    """Compact queries/keys per channel and their d x d similarity.

    Returns Q, K as (B, d, N') (one row per channel) and S = Q K^T.
    """
    F, _ = _prepare(layer, F)
    C, _ = _channel_vectors(F)
    return _ccc(layer, C)


def channel_similarity(Q, K) -> Tensor:
    """S = Q^T K for (…, N', d) query/key matrices: S[i, j] compares channels i and j."""
    Q, K = as_tensor(Q), as_tensor(K)
    return matmul(swapaxes(Q, -1, -2), K)


def _ccc(layer, C):
    q = mlp_forward(layer.mlp_q, C)
    k = mlp_forward(layer.mlp_k, C)
    return q, k, matmul(q, swapaxes(k, 1, 2))


def cae_affinity(S) -> Tensor:
    """softmax over rows of (column max - S): similar channels get low weight."""
    S = as_tensor(S)
    col_max, _ = reduce_max(S, axis=-2, keepdims=True)
    return softmax_axis(sub(col_max, S), axis=-2)


def caa_forward(layer: CaaLayer, F, return_state: bool = False):
    F, squeeze = _prepare(layer, F)
    C, perm = _channel_vectors(F)
    q, k, S = _ccc(layer, C)
    A = cae_affinity(S)
    v = mlp_forward(layer.mlp_v, C)  # (B, d, N), canonical point order
    V = permute_points(swapaxes(v, 1, 2), np.argsort(perm, axis=1))  # back to input order
    out = F + mul(layer.alpha, matmul(V, A))
    if squeeze:
        out = out.reshape(*out.shape[1:])
    if not return_state:
        return out
    state = AttentionState(
        Q=np.swapaxes(q.data, 1, 2),
        K=np.swapaxes(k.data, 1, 2),
        V=V.data,
        S=S.data,
        A=A.data,
        alpha=float(layer.alpha.data[0]),
    )
    return out, state
