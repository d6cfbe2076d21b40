"""kNN graphs, edge features and the per-point geometric descriptor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .tensor import Tensor, as_tensor, broadcast_to, concat_axis, gather_neighbors, log_decision, sub


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)
    label: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class NeighborIndex:
    indices: np.ndarray  # (N, k) or (B, N, k), int64
    k: int
    source_space: str = "feature"  # "coordinate" | "feature"


def knn_search(features, k: int, source_space: str = "feature") -> NeighborIndex:
    """Exact Euclidean kNN with the query point excluded.

    Rows are ordered by ascending distance, ties by ascending point index.
    Accepts (N, D) or batched (B, N, D) input.
    """
    x = features.data if isinstance(features, Tensor) else np.asarray(features)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[2] < 1:
        raise ValueError(f"features must be (N, D) or (B, N, D), got {x.shape}")
    n = x.shape[1]
    if not 0 < k < n:
        raise ValueError(f"k must satisfy 0 < k < N (k={k}, N={n})")
    idx = K.knn(x, k)
    log_decision(idx)
    return NeighborIndex(idx[0] if squeeze else idx, k, source_space)


def _batched(idx: np.ndarray) -> np.ndarray:
    return idx[None] if idx.ndim == 2 else idx


def build_edge_features(x, nbr: NeighborIndex) -> Tensor:
    """[x_i, x_j - x_i] for every point i and neighbor j: (…, N, k, 2d)."""
    x = as_tensor(x)
    squeeze = x.ndim == 2
    xb = x.reshape(1, *x.shape) if squeeze else x
    idx = _batched(nbr.indices)
    if idx.shape[:2] != xb.shape[:2]:
        raise ValueError(f"neighbor index {idx.shape} does not match features {xb.shape}")
    B, N, d = xb.shape
    nb = gather_neighbors(xb, idx)
    center = broadcast_to(xb.reshape(B, N, 1, d), (B, N, nbr.k, d))
    out = concat_axis([center, sub(nb, center)], axis=-1)
    return out.reshape(N, nbr.k, 2 * d) if squeeze else out


# ---------------------------------------------------------------------------
# geometric point descriptor
# ---------------------------------------------------------------------------

# Column groups for every descriptor form, in output order.
DESCRIPTOR_FORMS: dict[int, tuple[str, ...]] = {
    1: ("p",),
    2: ("p", "n", "l1", "l2"),
    3: ("p", "e1", "e2", "l1", "l2"),
    4: ("p", "pj1", "pj2", "l1", "l2"),
    5: ("p", "n", "e1", "e2"),
    6: ("p", "n", "e1", "e2", "l1", "l2"),
    7: ("p", "n", "nj1", "nj2", "e1", "e2"),
    8: ("p", "n", "nj1", "nj2", "e1", "e2", "e3", "l1", "l2", "l3"),
}

_ITEM_COLUMNS = {
    "p": ("x", "y", "z"),
    "n": ("nx", "ny", "nz"),
    "nj1": ("nj1x", "nj1y", "nj1z"),
    "nj2": ("nj2x", "nj2y", "nj2z"),
    "e1": ("e1x", "e1y", "e1z"),
    "e2": ("e2x", "e2y", "e2z"),
    "e3": ("e3x", "e3y", "e3z"),
    "pj1": ("pj1x", "pj1y", "pj1z"),
    "pj2": ("pj2x", "pj2y", "pj2z"),
    "l1": ("l1",),
    "l2": ("l2",),
    "l3": ("l3",),
}


def descriptor_columns(form_id: int) -> list[str]:
    if form_id not in DESCRIPTOR_FORMS:
        raise ValueError(f"unknown descriptor form {form_id}; expected 1-8")
    return [c for item in DESCRIPTOR_FORMS[form_id] for c in _ITEM_COLUMNS[item]]


def descriptor_length(form_id: int) -> int:
    return len(descriptor_columns(form_id))


@dataclass
class GeometricDescriptor:
    values: np.ndarray  # (N, m)
    form_id: int

    @property
    def m(self) -> int:
        return self.values.shape[-1]


def descriptor_array(points: np.ndarray, form_id: int = 6) -> np.ndarray:
    """Descriptor rows for (N, 3) or batched (B, N, 3) points, float64."""
    p = np.asarray(points, dtype=np.float64)
    squeeze = p.ndim == 2
    if squeeze:
        p = p[None]
    if p.shape[1] < 3:
        raise ValueError(f"descriptor needs at least 3 points, got {p.shape[1]}")
    cols = descriptor_columns(form_id)  # validates form_id
    idx = K.knn(p, 2)
    b = np.arange(p.shape[0])[:, None]
    pj1 = p[b, idx[..., 0]]
    pj2 = p[b, idx[..., 1]]
    e1 = pj1 - p
    e2 = pj2 - p
    e3 = pj1 - pj2
    items = {
        "p": p,
        "pj1": pj1,
        "pj2": pj2,
        "e1": e1,
        "e2": e2,
        "e3": e3,
        "n": np.cross(e1, e2),
        "nj1": np.cross(-e1, -e3),
        "nj2": np.cross(-e2, e3),
        "l1": np.linalg.norm(e1, axis=-1, keepdims=True),
        "l2": np.linalg.norm(e2, axis=-1, keepdims=True),
        "l3": np.linalg.norm(e3, axis=-1, keepdims=True),
    }
    out = np.concatenate([items[name] for name in DESCRIPTOR_FORMS[form_id]], axis=-1)
    assert out.shape[-1] == len(cols)
    return out[0] if squeeze else out


def geometric_descriptor(cloud: PointCloud, form_id: int = 6) -> GeometricDescriptor:
    if len(cloud) < 3:
        raise ValueError(f"descriptor needs at least 3 points, got {len(cloud)}")
    return GeometricDescriptor(descriptor_array(cloud.points, form_id), form_id)


def normalize_to_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the farthest point has norm 1."""
    p = np.asarray(cloud.points, dtype=np.float64)
    if len(p) == 0:
        raise ValueError("empty point cloud")
    centered = p - p.mean(axis=0)
    scale = np.linalg.norm(centered, axis=1).max()
    if scale == 0.0:
        raise ValueError("cannot normalize: all points are identical (zero scale)")
    dtype = cloud.points.dtype if np.issubdtype(cloud.points.dtype, np.floating) else np.float64
    return PointCloud((centered / scale).astype(dtype, copy=False), cloud.label)
