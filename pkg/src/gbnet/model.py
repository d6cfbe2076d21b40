"""Classifier assembly, loss, optimizer, training/evaluation loops and
checkpoints."""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .abem import AbemLayer, abem_forward
from .attention import CaaLayer, caa_forward
from .data import Dataset, augment
from .geometry import descriptor_array, descriptor_length
from .layers import MlpLayer, Module, mlp_forward
from .tensor import (
    Parameter,
    Tape,
    Tensor,
    concat_axis,
    cross_entropy,
    dropout,
    reduce_max,
    reduce_mean,
)

HEAD_INIT_SCALE = 1e-2

# ablation model id -> (descriptor form, ABEM branches)
ABLATIONS = {
    0: (1, "none"),
    1: (1, "prominent"),
    2: (1, "finegrained"),
    3: (1, "both"),
    4: (6, "none"),
    5: (6, "both"),
}


@dataclass
class ModelConfig:
    num_classes: int
    num_points: int = 256
    k: int = 20
    scales: tuple[int, ...] = (64, 64, 128, 256)
    descriptor_form: int = 6
    ratio: int = 4
    dropout: float = 0.5
    branches: str = "both"
    emb: int = 1024
    fc: tuple[int, ...] = (512, 256)
    slope: float = 0.2
    strict: bool = False
    seed: int = 0

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        self.fc = tuple(int(s) for s in self.fc)
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_points <= self.k:
            raise ValueError(f"num_points must exceed k (N={self.num_points}, k={self.k})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def reduced(cls, num_classes: int = 3, **kw) -> "ModelConfig":
        """Small profile used for end-to-end gradient checks."""
        base = dict(num_points=12, k=3, scales=(4, 4, 8, 16), ratio=4, dropout=0.0, emb=32, fc=(16, 8))
        base.update(kw)
        return cls(num_classes, **base)

    @classmethod
    def ablation(cls, model_id: int, num_classes: int, **kw) -> "ModelConfig":
        if model_id not in ABLATIONS:
            raise ValueError(f"unknown ablation model {model_id}; expected one of {sorted(ABLATIONS)}")
        form, branches = ABLATIONS[model_id]
        return cls(num_classes, descriptor_form=form, branches=branches, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"], d["fc"] = list(self.scales), list(self.fc)
        return d


class GbnetModel(Module):
    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        c = config
        d = descriptor_length(c.descriptor_form)
        layers = []
        for width in c.scales:
            layer = AbemLayer(d, width, c.k, c.num_points, rng, c.ratio, c.slope, c.branches, dtype)
            layers.append(layer)
            d = width
        self.abem_layers = layers
        skip = sum(layer.out_width for layer in layers)
        self.fuse_mlp = MlpLayer(skip, c.emb, rng, slope=c.slope, dtype=dtype)
        self.fuse_caa = CaaLayer(c.num_points, rng, c.ratio, c.slope, dtype)
        widths = (2 * c.emb,) + c.fc
        self.fc_layers = [MlpLayer(a, b, rng, slope=c.slope, dtype=dtype) for a, b in zip(widths, widths[1:])]
        self.fc_out = MlpLayer(widths[-1], c.num_classes, rng, bn=False, slope=1.0, dtype=dtype)
        # near-zero logits at init: the first loss sits at ln c whatever the feature scale
        self.fc_out.weight.data *= HEAD_INIT_SCALE

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def skip_width(self) -> int:
        return sum(layer.out_width for layer in self.abem_layers)

    def alpha_parameters(self) -> list[Parameter]:
        return [p for n, p in self.named_parameters() if n.endswith("alpha")]


def check_normalized(clouds: np.ndarray, tol: float = 1e-3) -> None:
    centroid = np.abs(clouds.mean(axis=1)).max()
    radius = np.linalg.norm(clouds, axis=-1).max(axis=1)
    if centroid > tol or np.any(np.abs(radius - 1.0) > tol):
        raise ValueError(
            f"input clouds are not normalized (max centroid offset {centroid:.3g}, radii {radius.min():.3g}..{radius.max():.3g})"
        )


def gbnet_forward(model: GbnetModel, clouds, rng: np.random.Generator | None = None, trace: dict | None = None) -> Tensor:
    """(B, N, 3) clouds -> (B, c) logits.  Train or eval behavior follows
    ``model.training``; ``rng`` drives dropout.  When ``trace`` is a dict it
    receives the per-ABEM states and the fused map before and after
    attention."""
    c = model.config
    pts = np.asarray(clouds.data if isinstance(clouds, Tensor) else clouds)
    if pts.ndim == 2:
        pts = pts[None]
    if pts.ndim != 3 or pts.shape[-1] != 3:
        raise ValueError(f"clouds must be (B, N, 3), got {pts.shape}")
    if pts.shape[1] <= c.k:
        raise ValueError(f"need N > k (N={pts.shape[1]}, k={c.k})")
    if c.strict:
        check_normalized(pts)
    dtype = model.dtype
    x = Tensor(descriptor_array(pts, c.descriptor_form).astype(dtype))
    coords = pts.astype(np.float64)

    skips = []
    states = []
    for i, layer in enumerate(model.abem_layers):
        res = abem_forward(layer, x, coords if i == 0 else None, return_state=trace is not None)
        skips.append(res[0])
        x = res[1]
        if trace is not None:
            states.append(res[2])
    fused = mlp_forward(model.fuse_mlp, concat_axis(skips, axis=-1))
    refined = caa_forward(model.fuse_caa, fused)
    if trace is not None:
        trace["abem"] = states
        trace["fused_pre"] = fused.data
        trace["fused_post"] = refined.data

    pooled_max, _ = reduce_max(refined, axis=1)
    h = concat_axis([pooled_max, reduce_mean(refined, axis=1)], axis=-1)
    drop = model.training and c.dropout > 0
    if drop and rng is None:
        rng = np.random.default_rng(c.seed)
    for fc in model.fc_layers:
        h = mlp_forward(fc, h)
        if drop:
            h = dropout(h, c.dropout, rng)
    return mlp_forward(model.fc_out, h)


def loss_cross_entropy(logits: Tensor, labels) -> Tensor:
    return cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


def cosine_lr(epoch: int, total_epochs: int, lr_max: float, lr_min: float) -> float:
    if total_epochs <= 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class SgdState:
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_cosine_step(
    state: SgdState,
    params: dict[str, Parameter],
    epoch: int,
    total_epochs: int,
    lr_max: float,
    lr_min: float,
) -> float:
    """v <- momentum * v + g;  w <- w - lr(epoch) * v.  Returns the lr used.
    Parameters without a gradient are left untouched."""
    lr = cosine_lr(epoch, total_epochs, lr_max, lr_min)
    for name, p in params.items():
        if p.grad is None:
            continue
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = (v * p.dtype.type(state.momentum) + p.grad).astype(p.dtype, copy=False)
        state.velocity[name] = v
        p.data = p.data - p.dtype.type(lr) * v
    return lr


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr_max: float = 0.1
    lr_min: float = 0.001
    momentum: float = 0.9
    seed: int = 0
    augment: bool = True
    scale_lo: float = 2.0 / 3.0
    scale_hi: float = 1.5
    translate_lo: float = -0.2
    translate_hi: float = 0.2
    freeze_alpha: bool = False

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ValueError(f"need lr_min < lr_max (got {self.lr_min}, {self.lr_max})")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 2, epoch]))


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    # a lone trailing cloud cannot feed batch statistics; fold it into its neighbor
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def trainable_parameters(model: GbnetModel, config: TrainConfig) -> dict[str, Parameter]:
    params = dict(model.named_parameters())
    if config.freeze_alpha:
        params = {n: p for n, p in params.items() if not n.endswith("alpha")}
    return params


def train_epoch(
    model: GbnetModel,
    optimizer: SgdState,
    dataset: Dataset,
    config: TrainConfig,
    epoch: int,
    rng: np.random.Generator | None = None,
) -> dict:
    """One pass over ``dataset`` with shuffling, augmentation and dropout
    all drawn from ``rng`` (derived from (seed, epoch) when omitted)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = epoch_rng(config.seed, epoch) if rng is None else rng
    model.train()
    params = trainable_parameters(model, config)
    labels = dataset.labels()
    order = rng.permutation(len(dataset))
    lr = cosine_lr(epoch, config.epochs, config.lr_max, config.lr_min)
    total_loss, correct = 0.0, 0
    for batch in _batches(order, config.batch_size):
        clouds = [dataset.clouds[i] for i in batch]
        if config.augment:
            clouds = [
                augment(cl, rng, (config.scale_lo, config.scale_hi), (config.translate_lo, config.translate_hi))
                for cl in clouds
            ]
        pts = np.stack([np.asarray(cl.points, np.float32) for cl in clouds])
        model.zero_grad()
        with Tape() as tape:
            logits = gbnet_forward(model, pts, rng)
            loss = loss_cross_entropy(logits, labels[batch])
        tape.backward(loss)
        tape.clear()  # records and tensors reference each other; release now
        sgd_cosine_step(optimizer, params, epoch, config.epochs, config.lr_max, config.lr_min)
        total_loss += float(loss.item()) * len(batch)
        correct += int((logits.data.argmax(axis=1) == labels[batch]).sum())
    model.zero_grad()
    return {"epoch": epoch, "loss": total_loss / len(dataset), "acc": correct / len(dataset), "lr": lr}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict(model: GbnetModel, dataset: Dataset, batch_size: int = 32) -> np.ndarray:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model.eval()
    preds = []
    for i in range(0, len(dataset), batch_size):
        pts = np.stack([np.asarray(c.points, np.float32) for c in dataset.clouds[i : i + batch_size]])
        preds.append(gbnet_forward(model, pts).data.argmax(axis=1))
    return np.concatenate(preds)


def confusion_matrix(labels, preds, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def _safe_div(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


def metrics_from_confusion(cm: np.ndarray) -> dict:
    """Accuracies and F1 from a confusion matrix (rows = true class).

    Average class accuracy is the unweighted mean of recalls over classes
    that occur; overall F1 is the micro average (equal to overall accuracy
    for single-label classification), macro F1 is reported alongside.
    """
    cm = np.asarray(cm, np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    recall = _safe_div(tp, support)
    precision = _safe_div(tp, predicted)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    present = support > 0
    return {
        "overall_acc": float(tp.sum() / total),
        "per_class_acc": recall.tolist(),
        "avg_class_acc": float(recall[present].mean()),
        "precision": precision.tolist(),
        "f1": f1.tolist(),
        "f1_micro": float(tp.sum() / total),
        "f1_macro": float(f1[present].mean()),
        "confusion": cm.tolist(),
    }


def evaluate(model: GbnetModel, dataset: Dataset, batch_size: int = 32) -> dict:
    preds = predict(model, dataset, batch_size)
    return metrics_from_confusion(confusion_matrix(dataset.labels(), preds, model.num_classes))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"GBNC"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def _records(model: GbnetModel, optimizer: SgdState | None):
    for name, arr in model.state_dict().items():
        yield name, arr
    if optimizer is not None:
        for name, v in sorted(optimizer.velocity.items()):
            yield f"@velocity/{name}", v


def checkpoint_bytes(model: GbnetModel, optimizer: SgdState | None = None, extra: dict | None = None) -> bytes:
    meta = {
        "model": model.config.to_dict(),
        "dtype": np.dtype(model.dtype).str,
        "momentum": None if optimizer is None else optimizer.momentum,
        "extra": extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    recs = list(_records(model, optimizer))
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(recs))]
    for name, arr in recs:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BI", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def checkpoint_save(path, model: GbnetModel, optimizer: SgdState | None = None, extra: dict | None = None) -> int:
    """Write atomically; returns the byte size."""
    buf = checkpoint_bytes(model, optimizer, extra)
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(buf)
    os.replace(tmp, path)
    return len(buf)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.off = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"not a checkpoint: magic {magic!r}, expected {CKPT_MAGIC!r} version {CKPT_VERSION}")
    version, meta_len = r.unpack("<II", "header")
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported, expected version {CKPT_VERSION}")
    meta = json.loads(r.take(meta_len, "config").decode())
    (count,) = r.unpack("<I", "record count")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I", "record name")
        name = r.take(nlen, "record name").decode()
        code, ndim = r.unpack("<BI", f"{name} header")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        dt = _CODE_DTYPES[code]
        raw = r.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize, f"{name} data")
        arrays[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    if r.off != len(buf):
        raise CheckpointError(f"{len(buf) - r.off} trailing bytes in checkpoint")
    return meta, arrays


def checkpoint_load(path, num_classes: int | None = None) -> tuple[GbnetModel, SgdState | None, dict]:
    """Parse the whole file before building anything, so a bad file never
    yields a partially loaded model."""
    meta, arrays = parse_checkpoint(Path(path).read_bytes())
    cfg = meta["model"]
    if num_classes is not None and cfg["num_classes"] != num_classes:
        raise CheckpointError(
            f"class-count mismatch: checkpoint has {cfg['num_classes']} classes, dataset has {num_classes}"
        )
    known = {f.name for f in fields(ModelConfig)}
    model = GbnetModel(ModelConfig(**{k: v for k, v in cfg.items() if k in known}), dtype=np.dtype(meta["dtype"]))
    state = {n: a for n, a in arrays.items() if not n.startswith("@")}
    model.load_state_dict(state)
    optimizer = None
    if meta.get("momentum") is not None:
        prefix = "@velocity/"
        optimizer = SgdState(meta["momentum"], {n[len(prefix) :]: a for n, a in arrays.items() if n.startswith(prefix)})
    return model, optimizer, meta.get("extra", {})
