"""Hot inner loops: kNN selection, neighbor gather/scatter, max over the
neighbor axis, and fused batch-norm + leaky rectifier.

Every kernel has a numba version and a pure-numpy version with identical
semantics.  The numba path is the default; set ``GBNET_NUMBA=0`` in the
environment (or call :func:`use_numba`) to force numpy.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


_USE_NUMBA = HAVE_NUMBA and os.environ.get("GBNET_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def use_numba(flag: bool | None = None) -> bool:
    """Query or set the backend switch.  Returns the active setting."""
    global _USE_NUMBA
    if flag is not None:
        _USE_NUMBA = bool(flag) and HAVE_NUMBA
    return _USE_NUMBA


def backend_name() -> str:
    return "numba" if _USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# k nearest neighbors (self excluded, distance asc, index asc on ties)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _knn_nb(x, k):
    B, N, D = x.shape
    out = np.empty((B, N, k), np.int64)
    bd = np.empty(k, np.float64)
    bi = np.empty(k, np.int64)
    for b in range(B):
        for i in range(N):
            filled = 0
            for j in range(N):
                if j == i:
                    continue
                d = 0.0
                for c in range(D):
                    t = x[b, j, c] - x[b, i, c]
                    d += t * t
                if filled < k:
                    p = filled
                    filled += 1
                elif d < bd[k - 1]:
                    p = k - 1
                else:
                    continue
                while p > 0 and bd[p - 1] > d:
                    bd[p] = bd[p - 1]
                    bi[p] = bi[p - 1]
                    p -= 1
                bd[p] = d
                bi[p] = j
            for p in range(k):
                out[b, i, p] = bi[p]
    return out


def _knn_np(x, k):
    B, N, _ = x.shape
    out = np.empty((B, N, k), np.int64)
    for b in range(B):
        diff = x[b][:, None, :] - x[b][None, :, :]
        d = np.einsum("ijc,ijc->ij", diff, diff)
        np.fill_diagonal(d, np.inf)
        out[b] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def knn(x: np.ndarray, k: int) -> np.ndarray:
    """Batched exact kNN over ``x`` of shape (B, N, D); distances in float64."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if _USE_NUMBA:
        return _knn_nb(x, k)
    return _knn_np(x, k)


# ---------------------------------------------------------------------------
# gather / scatter along the point axis
# ---------------------------------------------------------------------------


@njit(cache=True)
def _gather_nb(x, idx):
    B, N, C = x.shape
    M, k = idx.shape[1], idx.shape[2]
    out = np.empty((B, M, k, C), x.dtype)
    for b in range(B):
        for i in range(M):
            for j in range(k):
                src = idx[b, i, j]
                for c in range(C):
                    out[b, i, j, c] = x[b, src, c]
    return out


@njit(cache=True)
def _scatter_add_nb(g, idx, n_src):
    B, M, k, C = g.shape
    out = np.zeros((B, n_src, C), g.dtype)
    for b in range(B):
        for i in range(M):
            for j in range(k):
                dst = idx[b, i, j]
                for c in range(C):
                    out[b, dst, c] += g[b, i, j, c]
    return out


@njit(cache=True)
def _edge_sum_nb(center, nbr, idx):
    B, N, C = center.shape
    k = idx.shape[2]
    out = np.empty((B, N, k, C), center.dtype)
    for b in range(B):
        for i in range(N):
            for j in range(k):
                src = idx[b, i, j]
                for c in range(C):
                    out[b, i, j, c] = center[b, i, c] + nbr[b, src, c]
    return out


def gather(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """out[b, i, j] = x[b, idx[b, i, j]]."""
    if _USE_NUMBA:
        return _gather_nb(np.ascontiguousarray(x), idx)
    bidx = np.arange(x.shape[0])[:, None, None]
    return x[bidx, idx]


def scatter_add(g: np.ndarray, idx: np.ndarray, n_src: int) -> np.ndarray:
    """Adjoint of :func:`gather`: sums g[b, i, j] into row idx[b, i, j]."""
    if _USE_NUMBA:
        return _scatter_add_nb(np.ascontiguousarray(g), idx, n_src)
    B, _, _, C = g.shape
    out = np.zeros((B, n_src, C), g.dtype)
    bidx = np.broadcast_to(np.arange(B)[:, None, None], idx.shape)
    np.add.at(out, (bidx, idx), g)
    return out


def edge_sum(center: np.ndarray, nbr: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """out[b, i, j] = center[b, i] + nbr[b, idx[b, i, j]]."""
    if _USE_NUMBA:
        return _edge_sum_nb(np.ascontiguousarray(center), np.ascontiguousarray(nbr), idx)
    return center[:, :, None, :] + gather(nbr, idx)


# ---------------------------------------------------------------------------
# max over the neighbor axis of a (B, N, k, C) array
# ---------------------------------------------------------------------------


@njit(cache=True)
def _max_k_nb(x):
    B, N, k, C = x.shape
    vals = np.empty((B, N, C), x.dtype)
    arg = np.zeros((B, N, C), np.int64)
    for b in range(B):
        for i in range(N):
            for c in range(C):
                vals[b, i, c] = x[b, i, 0, c]
            for j in range(1, k):
                for c in range(C):
                    v = x[b, i, j, c]
                    if v > vals[b, i, c]:
                        vals[b, i, c] = v
                        arg[b, i, c] = j
    return vals, arg


@njit(cache=True)
def _route_k_nb(g, arg, k):
    B, N, C = g.shape
    out = np.zeros((B, N, k, C), g.dtype)
    for b in range(B):
        for i in range(N):
            for c in range(C):
                out[b, i, arg[b, i, c], c] = g[b, i, c]
    return out


def max_over_neighbors(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if _USE_NUMBA:
        return _max_k_nb(np.ascontiguousarray(x))
    arg = np.argmax(x, axis=2)
    vals = np.take_along_axis(x, arg[:, :, None, :], axis=2)[:, :, 0, :]
    return vals, arg


def route_max_grad(g: np.ndarray, arg: np.ndarray, k: int) -> np.ndarray:
    if _USE_NUMBA:
        return _route_k_nb(np.ascontiguousarray(g), arg, k)
    B, N, C = g.shape
    out = np.zeros((B, N, k, C), g.dtype)
    np.put_along_axis(out, arg[:, :, None, :], g[:, :, None, :], axis=2)
    return out


# ---------------------------------------------------------------------------
# fused batch norm + leaky rectifier over a (M, C) view
# ---------------------------------------------------------------------------


@njit(cache=True)
def _moments_nb(x):
    M, C = x.shape
    s = np.zeros(C, np.float64)
    for m in range(M):
        for c in range(C):
            s[c] += x[m, c]
    mean = s / M
    v = np.zeros(C, np.float64)
    for m in range(M):
        for c in range(C):
            t = x[m, c] - mean[c]
            v[c] += t * t
    return mean, v / M


@njit(cache=True)
def _bn_act_fwd_nb(x, mean, inv, gamma, beta, slope):
    M, C = x.shape
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    for m in range(M):
        for c in range(C):
            h = (x[m, c] - mean[c]) * inv[c]
            xhat[m, c] = h
            y = gamma[c] * h + beta[c]
            out[m, c] = y if y > 0 else slope * y
    return xhat, out


@njit(cache=True)
def _bn_act_bwd_sums_nb(g, xhat, gamma, beta, slope):
    M, C = g.shape
    sg = np.zeros(C, np.float64)
    sgx = np.zeros(C, np.float64)
    for m in range(M):
        for c in range(C):
            h = xhat[m, c]
            gy = g[m, c]
            if gamma[c] * h + beta[c] <= 0:
                gy = gy * slope
            sg[c] += gy
            sgx[c] += gy * h
    return sg, sgx


@njit(cache=True)
def _bn_act_bwd_dx_nb(g, xhat, gamma, beta, slope, inv, sg, sgx, training):
    M, C = g.shape
    dx = np.empty_like(g)
    scale = gamma * inv
    mg = sg / M
    mgx = sgx / M
    for m in range(M):
        for c in range(C):
            h = xhat[m, c]
            gy = g[m, c]
            if gamma[c] * h + beta[c] <= 0:
                gy = gy * slope
            if training:
                dx[m, c] = scale[c] * (gy - mg[c] - h * mgx[c])
            else:
                dx[m, c] = scale[c] * gy
    return dx


def moments(x2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and biased variance of a (M, C) array, in float64."""
    if _USE_NUMBA:
        return _moments_nb(np.ascontiguousarray(x2))
    x64 = x2.astype(np.float64, copy=False)
    mean = x64.mean(axis=0)
    return mean, ((x64 - mean) ** 2).mean(axis=0)


def bn_act_forward(x2, mean, inv, gamma, beta, slope):
    dt = x2.dtype
    mean = mean.astype(dt)
    inv = inv.astype(dt)
    if _USE_NUMBA:
        return _bn_act_fwd_nb(np.ascontiguousarray(x2), mean, inv, gamma, beta, dt.type(slope))
    xhat = (x2 - mean) * inv
    y = gamma * xhat + beta
    return xhat, np.where(y > 0, y, dt.type(slope) * y)


def bn_act_backward(g2, xhat, gamma, beta, slope, inv, training):
    """Returns (dx, dgamma, dbeta) for the fused op."""
    dt = g2.dtype
    inv = inv.astype(dt)
    if _USE_NUMBA:
        g2 = np.ascontiguousarray(g2)
        sg, sgx = _bn_act_bwd_sums_nb(g2, xhat, gamma, beta, dt.type(slope))
        dx = _bn_act_bwd_dx_nb(g2, xhat, gamma, beta, dt.type(slope), inv, sg.astype(dt), sgx.astype(dt), training)
        return dx, sgx.astype(dt), sg.astype(dt)
    y = gamma * xhat + beta
    gy = np.where(y > 0, g2, dt.type(slope) * g2)
    sg = gy.sum(axis=0, dtype=np.float64).astype(dt)
    sgx = (gy * xhat).sum(axis=0, dtype=np.float64).astype(dt)
    M = g2.shape[0]
    if training:
        dx = gamma * inv * (gy - sg / M - xhat * (sgx / M))
    else:
        dx = gamma * inv * gy
    return dx.astype(dt, copy=False), sgx, sg
