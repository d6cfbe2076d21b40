"""``gbnet`` command line: train, eval, gradcheck, describe, features,
bench, make-data and ingest.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .data import (
    SYNTHETIC_CLASSES,
    Dataset,
    FormatError,
    ingest_off_files,
    pack_read,
    pack_write,
    synthetic_dataset,
)
from .geometry import PointCloud, descriptor_array, descriptor_columns
from .model import (
    CheckpointError,
    GbnetModel,
    ModelConfig,
    SgdState,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    gbnet_forward,
    train_epoch,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

# key -> (type, default)
DEFAULTS: dict[str, tuple[type, object]] = {
    "dataset": (str, "synthetic"),
    "train_pack": (str, ""),
    "test_pack": (str, ""),
    "classes": (int, 6),
    "train_per_class": (int, 100),
    "test_per_class": (int, 25),
    "jitter": (float, 0.01),
    "points": (int, 256),
    "k": (int, 20),
    "scales": (tuple, (64, 64, 128, 256)),
    "ratio": (int, 4),
    "descriptor_form": (int, 6),
    "branches": (str, "both"),
    "ablation": (int, -1),
    "emb": (int, 1024),
    "fc": (tuple, (512, 256)),
    "dropout": (float, 0.5),
    "epochs": (int, 50),
    "batch_size": (int, 32),
    "lr_max": (float, 0.1),
    "lr_min": (float, 0.001),
    "momentum": (float, 0.9),
    "augment": (bool, True),
    "freeze_alpha": (bool, False),
    "seed": (int, 0),
    "target_acc": (float, 0.0),
    "time_budget": (float, 0.0),
}


def _parse_value(key: str, raw: str):
    typ = DEFAULTS[key][0]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is tuple:
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_assignments(lines, source: str) -> dict:
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def resolve_config(config_path: str | None, overrides) -> dict:
    """Defaults, then the config file, then ``--set`` overrides."""
    cfg = {k: v for k, (_, v) in DEFAULTS.items()}
    if config_path:
        try:
            text = Path(config_path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {config_path}: {e.strerror}") from None
        cfg.update(parse_assignments(text.splitlines(), config_path))
    for i, item in enumerate(overrides or []):
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.update(parse_assignments([item], "--set"))
    return cfg


def echo_config(cfg: dict, out=None) -> None:
    out = out or sys.stdout
    print("# resolved config", file=out)
    for key in sorted(cfg):
        print(f"{key}={_format_value(cfg[key])}", file=out)
    out.flush()


def model_config(cfg: dict, num_classes: int) -> ModelConfig:
    kw = dict(
        num_points=cfg["points"],
        k=cfg["k"],
        scales=cfg["scales"],
        ratio=cfg["ratio"],
        dropout=cfg["dropout"],
        emb=cfg["emb"],
        fc=cfg["fc"],
        seed=cfg["seed"],
    )
    try:
        if cfg["ablation"] >= 0:
            return ModelConfig.ablation(cfg["ablation"], num_classes, **kw)
        return ModelConfig(num_classes, descriptor_form=cfg["descriptor_form"], branches=cfg["branches"], **kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=cfg["epochs"],
            batch_size=cfg["batch_size"],
            lr_max=cfg["lr_max"],
            lr_min=cfg["lr_min"],
            momentum=cfg["momentum"],
            seed=cfg["seed"],
            augment=cfg["augment"],
            freeze_alpha=cfg["freeze_alpha"],
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_datasets(cfg: dict) -> tuple[Dataset, Dataset]:
    if cfg["dataset"] == "synthetic":
        if not 2 <= cfg["classes"] <= len(SYNTHETIC_CLASSES):
            raise ConfigError(f"classes must be in [2, {len(SYNTHETIC_CLASSES)}] for the synthetic dataset")
        classes = SYNTHETIC_CLASSES[: cfg["classes"]]
        common = dict(n_points=cfg["points"], jitter=cfg["jitter"], seed=cfg["seed"], classes=classes)
        return (
            synthetic_dataset("train", cfg["train_per_class"], **common),
            synthetic_dataset("test", cfg["test_per_class"], **common),
        )
    if cfg["dataset"] == "pack":
        if not cfg["train_pack"] or not cfg["test_pack"]:
            raise ConfigError("dataset=pack needs train_pack and test_pack")
        names = [str(i) for i in range(cfg["classes"])]
        return pack_read(cfg["train_pack"], names, "train"), pack_read(cfg["test_pack"], names, "test")
    raise ConfigError(f"invalid value for dataset: {cfg['dataset']!r} (synthetic or pack)")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set)
    echo_config(cfg)
    train, test = load_datasets(cfg)
    mcfg = model_config(cfg, train.num_classes)
    tcfg = train_config(cfg)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_atomic(out / "config.cfg", "".join(f"{k}={_format_value(v)}\n" for k, v in sorted(cfg.items())))

    model = GbnetModel(mcfg)
    opt = SgdState(tcfg.momentum)
    best = -1.0
    start = time.perf_counter()
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as log:
        for epoch in range(tcfg.epochs):
            rec = train_epoch(model, opt, train, tcfg, epoch)
            ev = evaluate(model, test)
            rec.update(test_acc=ev["overall_acc"], test_avg_class_acc=ev["avg_class_acc"])
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()
            elapsed = time.perf_counter() - start
            print(
                f"epoch {epoch}: loss={rec['loss']:.4f} acc={rec['acc']:.4f} lr={rec['lr']:.5f} "
                f"test_acc={ev['overall_acc']:.4f} ({elapsed:.0f}s)",
                flush=True,
            )
            if ev["overall_acc"] > best:
                best = ev["overall_acc"]
                checkpoint_save(out / "best.gbnc", model, opt, {"epoch": epoch, "train": vars(tcfg)})
                _write_atomic(
                    out / "confusion.csv",
                    _csv_text(["true\\pred"] + list(range(model.num_classes)),
                              [[i] + row for i, row in enumerate(ev["confusion"])]),
                )
            if cfg["target_acc"] > 0 and ev["overall_acc"] >= cfg["target_acc"]:
                print(f"target accuracy {cfg['target_acc']} reached at epoch {epoch}")
                break
            if cfg["time_budget"] > 0 and elapsed >= cfg["time_budget"]:
                print(f"time budget {cfg['time_budget']}s exhausted after epoch {epoch}")
                break
    checkpoint_save(out / "final.gbnc", model, opt, {"epoch": epoch if tcfg.epochs else -1, "train": vars(tcfg)})
    print(f"best test accuracy {best:.4f}; artifacts in {out}")
    return EXIT_OK


def _print_metrics(m: dict, names) -> None:
    print(f"overall_acc={m['overall_acc']:.4f}")
    print(f"avg_class_acc={m['avg_class_acc']:.4f}")
    print(f"f1_overall={m['f1_micro']:.4f}")
    print(f"f1_macro={m['f1_macro']:.4f}")
    for i, (acc, f1) in enumerate(zip(m["per_class_acc"], m["f1"])):
        print(f"class {names[i] if i < len(names) else i}: acc={acc:.4f} f1={f1:.4f}")


def cmd_eval(args) -> int:
    cfg = resolve_config(args.config, args.set)
    echo_config(cfg)
    _, test = load_datasets(cfg)
    model, _, _ = checkpoint_load(args.checkpoint, num_classes=test.num_classes)
    m = evaluate(model, test)
    _print_metrics(m, test.class_names)
    if args.json:
        _write_atomic(Path(args.json), json.dumps(m, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import verify

    cfg = {"targets": ",".join(args.target or ["all"]), "backend": _kernels.backend_name()}
    echo_config(cfg)
    try:
        verify.resolve_targets(args.target)
    except KeyError as e:
        raise ConfigError(e.args[0]) from None
    if args.inject_fault:
        with verify.corrupted_backward(args.inject_fault if args.inject_fault != "any" else None):
            reports, seconds = verify.run_suite(args.target)
    else:
        reports, seconds = verify.run_suite(args.target)
    for r in reports:
        print(r.line())
    ok = all(r.passed for r in reports)
    print(f"{'PASS' if ok else 'FAIL'}: {sum(r.passed for r in reports)}/{len(reports)} targets in {seconds:.1f}s")
    return EXIT_OK if ok else EXIT_VERIFY


def read_cloud(path: str, index: int = 0) -> PointCloud:
    """A cloud from a GBPC pack (``index`` selects it) or an xyz text file."""
    p = Path(path)
    with open(p, "rb") as f:
        magic = f.read(4)
    if magic == b"GBPC" or p.suffix == ".gbpc":
        ds = pack_read(p)
        if not 0 <= index < len(ds):
            raise FormatError(f"pack has {len(ds)} clouds, index {index} out of range")
        return ds.clouds[index]
    rows = []
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        vals = line.replace(",", " ").split()
        try:
            if len(vals) != 3:
                raise ValueError
            rows.append([float(v) for v in vals])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: expected 3 coordinates, got {line!r}") from None
    return PointCloud(np.array(rows).reshape(-1, 3))


def cmd_describe(args) -> int:
    cfg = {"input": args.input, "index": args.index, "form": args.form, "output": args.output or "-"}
    echo_config(cfg, sys.stderr if not args.output else sys.stdout)
    cloud = read_cloud(args.input, args.index)
    try:
        cols = descriptor_columns(args.form)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if len(cloud) < 3:
        raise ValueError(f"descriptor needs at least 3 points, got {len(cloud)}")
    values = descriptor_array(cloud.points, args.form)
    text = _csv_text(["index"] + cols, ([i] + [_fmt(v) for v in row] for i, row in enumerate(values)))
    if args.output:
        _write_atomic(Path(args.output), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def feature_rows(model: GbnetModel, points: np.ndarray):
    """(point, layer, branch, norm) rows: per-point L2 norms of each ABEM's
    branch outputs and of the fused map before and after attention."""
    model.eval()
    trace: dict = {}
    gbnet_forward(model, points[None].astype(np.float32), trace=trace)
    rows = []

    def add(layer, branch, arr):
        for i, v in enumerate(np.linalg.norm(arr[0].astype(np.float64), axis=-1)):
            rows.append((i, layer, branch, v))

    for li, st in enumerate(trace["abem"], start=1):
        if st.f_M is not None:
            add(f"abem{li}", "prominent", st.f_M)
        if st.f_A is not None:
            add(f"abem{li}", "finegrained", st.f_A)
    add("fuse", "pre_caa", trace["fused_pre"])
    add("fuse", "post_caa", trace["fused_post"])
    return rows


def cmd_features(args) -> int:
    cfg = {"checkpoint": args.checkpoint, "input": args.input, "index": args.index, "output": args.output}
    echo_config(cfg)
    model, _, _ = checkpoint_load(args.checkpoint)
    cloud = read_cloud(args.input, args.index)
    rows = feature_rows(model, np.asarray(cloud.points))
    _write_atomic(Path(args.output), _csv_text(["point", "layer", "branch", "norm"],
                                               ((p, l, b, _fmt(v)) for p, l, b, v in rows)))
    print(f"wrote {len(rows)} rows to {args.output}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = {"checkpoint": args.checkpoint, "batch": args.batch, "repeats": args.repeats,
           "warmup": args.warmup, "backend": _kernels.backend_name()}
    echo_config(cfg)
    if args.repeats < 1 or args.batch < 1:
        raise ConfigError("repeats and batch must be >= 1")
    model, _, _ = checkpoint_load(args.checkpoint)
    model.eval()
    c = model.config
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((args.batch, c.num_points, 3))
    pts /= np.linalg.norm(pts, axis=-1, keepdims=True)
    pts = pts.astype(np.float32)
    for _ in range(args.warmup):
        gbnet_forward(model, pts)
    times = []
    for _ in range(args.repeats):
        t = time.perf_counter()
        gbnet_forward(model, pts)
        times.append((time.perf_counter() - t) * 1e3)
    times = np.array(times)
    report = {
        "parameters": model.num_parameters(),
        "checkpoint_bytes": os.path.getsize(args.checkpoint),
        "batch": args.batch,
        "repeats": args.repeats,
        "latency_ms_mean": float(times.mean()),
        "latency_ms_median": float(np.median(times)),
        "latency_ms_std": float(times.std()),
        "per_cloud_ms_mean": float(times.mean() / args.batch),
    }
    for k, v in report.items():
        print(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}")
    return EXIT_OK


def cmd_make_data(args) -> int:
    cfg = resolve_config(args.config, args.set)
    echo_config(cfg)
    if cfg["dataset"] != "synthetic":
        raise ConfigError("make-data generates the synthetic dataset only")
    train, test = load_datasets(cfg)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    pack_write(train, out / "train.gbpc")
    pack_write(test, out / "test.gbpc")
    print(f"wrote {len(train)} train and {len(test)} test clouds to {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = {"files": len(args.off), "labels": ",".join(map(str, args.labels)), "points": args.points,
           "seed": args.seed, "output": args.output}
    echo_config(cfg)
    if len(args.labels) != len(args.off):
        raise ConfigError(f"{len(args.off)} OFF files but {len(args.labels)} labels")
    ds = ingest_off_files(args.off, args.labels, args.points, args.seed)
    pack_write(ds, args.output)
    print(f"wrote {len(ds)} clouds to {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gbnet", description="Point-cloud classifier toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("train", help="train a model")
    with_config(sp)
    sp.add_argument("--output-dir", default="runs/train")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--json", help="also write metrics as JSON")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--target", action="append", help="restrict to a target (repeatable)")
    sp.add_argument("--inject-fault", nargs="?", const="any", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("describe", help="per-point geometric descriptor as CSV")
    sp.add_argument("input", help="GBPC pack or xyz text file")
    sp.add_argument("--form", type=int, default=6)
    sp.add_argument("--index", type=int, default=0, help="cloud index within a pack")
    sp.add_argument("--output", help="CSV path (stdout when omitted)")
    sp.set_defaults(func=cmd_describe)

    sp = sub.add_parser("features", help="per-point feature norms as CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("input")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("bench", help="parameter count and inference latency")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--repeats", type=int, default=10)
    sp.add_argument("--warmup", type=int, default=2)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("make-data", help="write the synthetic benchmark as GBPC packs")
    with_config(sp)
    sp.add_argument("--output-dir", default="data")
    sp.set_defaults(func=cmd_make_data)

    sp = sub.add_parser("ingest", help="sample OFF meshes into a GBPC pack")
    sp.add_argument("off", nargs="+")
    sp.add_argument("--labels", type=int, nargs="+", required=True)
    sp.add_argument("--points", type=int, default=1024)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_ingest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, CheckpointError, ValueError, OSError, KeyError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
