"""Time every hot kernel under the numba and numpy backends and check that
both return the same result.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--points 256] [--batch 8]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from gbnet import _kernels as K


def cases(batch: int, n: int, k: int, c: int, rng: np.random.Generator):
    x3 = rng.standard_normal((batch, n, 14))
    feat = rng.standard_normal((batch, n, c)).astype(np.float32)
    idx = K.knn(x3, k)
    edges = rng.standard_normal((batch, n, k, c)).astype(np.float32)
    _, arg = K.max_over_neighbors(edges)
    g_pool = rng.standard_normal((batch, n, c)).astype(np.float32)
    x2 = edges.reshape(-1, c)
    mean, var = K.moments(x2)
    inv = (1.0 / np.sqrt(var + 1e-5)).astype(np.float32)
    gamma = rng.uniform(0.5, 1.5, c).astype(np.float32)
    beta = rng.normal(0, 0.1, c).astype(np.float32)
    xhat = ((x2 - mean) * inv).astype(np.float32)
    g2 = rng.standard_normal(x2.shape).astype(np.float32)
    return {
        "knn (D=14)": lambda: K.knn(x3, k),
        "gather": lambda: K.gather(feat, idx),
        "scatter_add": lambda: K.scatter_add(edges, idx, n),
        "edge_sum": lambda: K.edge_sum(feat, feat, idx),
        "max_over_neighbors": lambda: K.max_over_neighbors(edges),
        "route_max_grad": lambda: K.route_max_grad(g_pool, arg, k),
        "moments": lambda: K.moments(x2),
        "bn_act_forward": lambda: K.bn_act_forward(x2, mean, inv, gamma, beta, 0.2),
        "bn_act_backward": lambda: K.bn_act_backward(g2, xhat, gamma, beta, 0.2, inv, True),
    }


def _flat(result):
    if isinstance(result, (list, tuple)):
        return [a for r in result for a in _flat(r)]
    return [np.asarray(result)]


def timed(fn, repeats: int) -> tuple[float, object]:
    out = fn()  # warmup, also triggers compilation
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best * 1e3, out


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--channels", type=int, default=64)
    args = p.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    table = cases(args.batch, args.points, args.k, args.channels, rng)
    previous = K.use_numba()
    print(f"B={args.batch} N={args.points} k={args.k} C={args.channels}, best of {args.repeats}")
    print(f"{'kernel':<20} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}  max |diff|")
    try:
        for name, fn in table.items():
            K.use_numba(True)
            t_nb, out_nb = timed(fn, args.repeats)
            K.use_numba(False)
            t_np, out_np = timed(fn, args.repeats)
            diff = max(
                float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)), initial=0.0))
                for a, b in zip(_flat(out_nb), _flat(out_np))
            )
            print(f"{name:<20} {t_nb:>10.2f} {t_np:>10.2f} {t_np / t_nb:>7.1f}x  {diff:.2e}")
    finally:
        K.use_numba(previous)


if __name__ == "__main__":
    main()
