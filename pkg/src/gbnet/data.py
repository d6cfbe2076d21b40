"""Mesh ingestion, surface sampling, synthetic shapes, augmentation and the
GBPC binary pack format."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, normalize_to_unit_sphere

SYNTHETIC_CLASSES = ("sphere", "cube", "cylinder", "cone", "torus", "plane")
PACK_MAGIC = b"GBPC"
PACK_VERSION = 1


class FormatError(ValueError):
    """Malformed OFF or pack input."""


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError(f"face index out of range [0, {len(self.vertices)})")

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class Dataset:
    clouds: list[PointCloud]
    class_names: list[str] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        c = len(self.class_names)
        for i, cloud in enumerate(self.clouds):
            if cloud.label is None or (c and not 0 <= cloud.label < c):
                raise ValueError(f"cloud {i}: label {cloud.label} outside [0, {c})")

    def __len__(self) -> int:
        return len(self.clouds)

    @property
    def num_classes(self) -> int:
        if self.class_names:
            return len(self.class_names)
        return 1 + max(c.label for c in self.clouds) if self.clouds else 0

    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clouds], dtype=np.int64)

    def stacked(self) -> np.ndarray:
        """(B, N, 3) float32 points; every cloud must have the same N."""
        return np.stack([np.asarray(c.points, np.float32) for c in self.clouds])


# ---------------------------------------------------------------------------
# OFF meshes
# ---------------------------------------------------------------------------


def _content_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _ints(tokens, lineno, what):
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise FormatError(f"line {lineno}: malformed {what}: {' '.join(tokens)!r}") from None


def load_off(path: str | os.PathLike) -> Mesh:
    """Parse an OFF file with triangular faces.

    Accepts the header and counts on separate lines or fused as ``OFF3 1 0``
    (a quirk of some ModelNet files).
    """
    lines = _content_lines(Path(path).read_text())
    try:
        lineno, head = next(lines)
    except StopIteration:
        raise FormatError("line 1: empty file, expected OFF header") from None
    if not head[0].startswith("OFF"):
        raise FormatError(f"line {lineno}: expected OFF header, got {head[0]!r}")
    rest = ([head[0][3:]] if len(head[0]) > 3 else []) + head[1:]
    if not rest:
        try:
            lineno, rest = next(lines)
        except StopIteration:
            raise FormatError(f"line {lineno + 1}: missing counts line") from None
    counts = _ints(rest, lineno, "counts")
    if len(counts) < 2 or counts[0] < 0 or counts[1] < 0:
        raise FormatError(f"line {lineno}: counts line needs vertex and face counts, got {rest}")
    n_vert, n_face = counts[0], counts[1]

    verts = np.empty((n_vert, 3))
    for i in range(n_vert):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise FormatError(f"file ends after {i} of {n_vert} vertices") from None
        if len(tok) < 3:
            raise FormatError(f"line {lineno}: vertex needs 3 coordinates")
        try:
            verts[i] = [float(t) for t in tok[:3]]
        except ValueError:
            raise FormatError(f"line {lineno}: malformed vertex {' '.join(tok)!r}") from None

    faces = np.empty((n_face, 3), np.int64)
    for i in range(n_face):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise FormatError(f"file ends after {i} of {n_face} faces") from None
        vals = _ints(tok, lineno, "face")
        if vals[0] != 3:
            raise FormatError(f"line {lineno}: non-triangle face with {vals[0]} vertices")
        if len(vals) < 4:
            raise FormatError(f"line {lineno}: face lists fewer than 3 vertex indices")
        if min(vals[1:4]) < 0 or max(vals[1:4]) >= n_vert:
            raise FormatError(f"line {lineno}: face index out of range [0, {n_vert})")
        faces[i] = vals[1:4]
    return Mesh(verts, faces)


def sample_mesh_surface(mesh: Mesh, n_points: int, rng: np.random.Generator) -> PointCloud:
    """Area-weighted face choice, then uniform barycentric placement."""
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero total surface area")
    face = rng.choice(len(areas), size=n_points, p=areas / total)
    u = rng.random(n_points)
    v = rng.random(n_points)
    fold = u + v > 1.0
    u[fold], v[fold] = 1.0 - u[fold], 1.0 - v[fold]
    a, b, c = (mesh.vertices[mesh.faces[face, i]] for i in range(3))
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return PointCloud(pts)


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------


def _unit(p):
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def _sphere(n, rng):
    # antipodal pairs (plus a zero-sum triple for odd n) keep the centroid at
    # the center, so normalization leaves every point on the unit sphere
    triple = n % 2
    half = _unit(rng.standard_normal(((n - 3 * triple) // 2, 3)))
    parts = [half, -half]
    if triple:
        u = _unit(rng.standard_normal((1, 3)))[0]
        v = _unit(np.cross(u, rng.standard_normal(3))[None])[0]
        w = np.cross(u, v)
        angles = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
        parts.append(np.cos(angles)[:, None] * v + np.sin(angles)[:, None] * w)
    return rng.permutation(np.concatenate(parts))


def _cube(n, rng):
    half = rng.uniform(0.75, 1.25, size=3) / 2
    pairs = [(1, 2), (0, 2), (0, 1)]  # in-plane axes per normal axis
    side_area = np.array([4 * half[i] * half[j] for i, j in pairs])
    w = np.repeat(side_area, 2) / (2 * side_area.sum())
    side = rng.choice(6, size=n, p=w)
    p = rng.uniform(-1, 1, size=(n, 3)) * half
    axis, sign = side // 2, np.where(side % 2 == 0, 1.0, -1.0)
    p[np.arange(n), axis] = sign * half[axis]
    return p


def _cylinder(n, rng):
    h = rng.uniform(1.5, 2.5)
    r = 1.0
    lateral, cap = 2 * np.pi * r * h, np.pi * r * r
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.random(n)))
    z = np.where(part == 0, rng.uniform(-h / 2, h / 2, n), np.where(part == 1, h / 2, -h / 2))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _cone(n, rng):
    r, h = 1.0, rng.uniform(1.5, 2.5)
    lateral, base = np.pi * r * np.hypot(r, h), np.pi * r * r
    on_side = rng.random(n) < lateral / (lateral + base)
    t = np.sqrt(rng.random(n))  # distance from apex, area-uniform
    rad = np.where(on_side, r * t, r * np.sqrt(rng.random(n)))
    z = np.where(on_side, h / 2 - h * t, -h / 2)
    theta = rng.uniform(0, 2 * np.pi, n)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _torus(n, rng):
    big, small = 1.0, rng.uniform(0.25, 0.45)
    out = np.empty((0, 2))
    while len(out) < n:  # accept tube angle with density proportional to local area
        phi = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.random(2 * n) * (big + small) <= big + small * np.cos(phi)
        out = np.concatenate([out, np.stack([phi[keep], rng.uniform(0, 2 * np.pi, keep.sum())], 1)])
    phi, theta = out[:n, 0], out[:n, 1]
    ring = big + small * np.cos(phi)
    return np.stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)], axis=1)


def _plane(n, rng):
    w, d = rng.uniform(1.0, 2.0, size=2)
    return np.stack([rng.uniform(-w / 2, w / 2, n), rng.uniform(-d / 2, d / 2, n), np.zeros(n)], axis=1)


_GENERATORS = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "plane": _plane,
}


def _azimuth_rotation(rng) -> np.ndarray:
    a = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def generate_synthetic(
    class_kind: str, n_points: int, jitter: float, rng: np.random.Generator
) -> PointCloud:
    """Surface sample of a parametric shape with jitter and a random pose,
    normalized to the unit sphere."""
    if class_kind not in _GENERATORS:
        raise ValueError(f"unknown synthetic class {class_kind!r}; expected one of {SYNTHETIC_CLASSES}")
    if n_points < 16:
        raise ValueError(f"n_points must be >= 16, got {n_points}")
    p = _GENERATORS[class_kind](n_points, rng)
    if jitter > 0:
        p = p + rng.normal(0.0, jitter, size=p.shape)
    p = p @ _azimuth_rotation(rng).T
    return normalize_to_unit_sphere(PointCloud(p))


def _stream(seed: int, tag: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, sum(map(ord, tag)) * 7919 + len(tag), index]))


def synthetic_dataset(
    split: str = "train",
    per_class: int | None = None,
    n_points: int = 256,
    jitter: float = 0.01,
    seed: int = 0,
    classes=SYNTHETIC_CLASSES,
) -> Dataset:
    """Balanced synthetic benchmark: 100 clouds per class for train and 25
    for test by default.  Cloud ``i`` is drawn from its own stream keyed by
    (seed, split, i), so content does not depend on generation order."""
    if per_class is None:
        per_class = 100 if split == "train" else 25
    clouds = []
    for i in range(per_class * len(classes)):
        label = i % len(classes)
        cloud = generate_synthetic(classes[label], n_points, jitter, _stream(seed, split, i))
        clouds.append(PointCloud(cloud.points.astype(np.float32), label))
    return Dataset(clouds, list(classes), split)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def augment(
    cloud: PointCloud,
    rng: np.random.Generator,
    scale_range=(2.0 / 3.0, 1.5),
    translate_range=(-0.2, 0.2),
) -> PointCloud:
    """Per-axis random scale, then a random global translation."""
    for lo, hi in (scale_range, translate_range):
        if lo > hi:
            raise ValueError(f"invalid range ({lo}, {hi})")
    scale = rng.uniform(*scale_range, size=3)
    shift = rng.uniform(*translate_range, size=3)
    p = np.asarray(cloud.points)
    return PointCloud((p * scale + shift).astype(p.dtype, copy=False), cloud.label)


# ---------------------------------------------------------------------------
# GBPC pack
# ---------------------------------------------------------------------------


def pack_bytes(dataset: Dataset) -> bytes:
    parts = [PACK_MAGIC, struct.pack("<II", PACK_VERSION, len(dataset.clouds))]
    for cloud in dataset.clouds:
        pts = np.ascontiguousarray(cloud.points, dtype="<f4")
        parts.append(struct.pack("<II", len(pts), cloud.label))
        parts.append(pts.tobytes())
    return b"".join(parts)


def pack_write(dataset: Dataset, path: str | os.PathLike) -> None:
    Path(path).write_bytes(pack_bytes(dataset))


def unpack_bytes(buf: bytes, class_names=None, split: str = "train") -> Dataset:
    if len(buf) < 12:
        raise FormatError(f"pack truncated: {len(buf)} bytes, header needs 12")
    if buf[:4] != PACK_MAGIC:
        raise FormatError(f"bad pack magic {buf[:4]!r}, expected {PACK_MAGIC!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != PACK_VERSION:
        raise FormatError(f"unsupported pack version {version}, expected {PACK_VERSION}")
    off, clouds = 12, []
    for i in range(count):
        if off + 8 > len(buf):
            raise FormatError(f"pack truncated in header of cloud {i}")
        n, label = struct.unpack_from("<II", buf, off)
        off += 8
        end = off + 12 * n
        if end > len(buf):
            raise FormatError(f"pack truncated in points of cloud {i}")
        pts = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=off).reshape(n, 3).astype(np.float32)
        clouds.append(PointCloud(pts, int(label)))
        off = end
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after {count} clouds")
    return Dataset(clouds, list(class_names or []), split)


def pack_read(path: str | os.PathLike, class_names=None, split: str = "train") -> Dataset:
    return unpack_bytes(Path(path).read_bytes(), class_names, split)


def ingest_off_files(
    paths, labels, n_points: int, seed: int = 0, class_names=None, split: str = "train"
) -> Dataset:
    """OFF meshes -> sampled, normalized clouds; stream per (seed, file index)."""
    clouds = []
    for i, (path, label) in enumerate(zip(paths, labels)):
        cloud = sample_mesh_surface(load_off(path), n_points, _stream(seed, "off", i))
        cloud = normalize_to_unit_sphere(cloud)
        clouds.append(PointCloud(cloud.points.astype(np.float32), int(label)))
    return Dataset(clouds, list(class_names or []), split)
