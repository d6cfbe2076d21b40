"""The finite-difference suite run by ``gbnet gradcheck`` and the tests.

Every target builds a small float64 instance, projects its output to a
scalar and compares recorded gradients with central differences.
"""

from __future__ import annotations

import contextlib
import time
from typing import Callable

import numpy as np

from . import tensor as T
from .abem import AbemLayer, abem_forward, finegrained_encode, prominent_encode
from .attention import CaaLayer, cae_affinity, caa_forward, ccc_compute
from .geometry import knn_search
from .gradcheck import GradCheckReport, grad_check, projection_loss
from .layers import (
    BatchNorm,
    LfcLayer,
    MlpLayer,
    batchnorm_forward,
    edgeconv_forward,
    edgelfc_forward,
    lfc_forward,
    mlp_forward,
)
from .model import GbnetModel, ModelConfig, gbnet_forward, loss_cross_entropy

F64 = np.float64
TOL = 1e-4
TOL_END_TO_END = 1e-3
# Whole-network gradients span many decades; at h=1e-5 rounding in the
# O(1) loss swamps the smallest ones, so the deep check uses a wider step.
STEP_END_TO_END = 3e-4


def _rng(seed=0):
    return np.random.default_rng(seed)


def _var(shape, seed, scale=1.0):
    return T.Tensor(_rng(seed).standard_normal(shape) * scale, requires_grad=True)


def _perturb_params(module, seed=1):
    """Random BN affine terms and nonzero attention weights, so no
    gradient path is trivially zero."""
    rng = _rng(seed)
    for name, p in module.named_parameters():
        if name.endswith("alpha"):
            p.data[...] = rng.uniform(0.3, 0.8, p.shape)
        elif name.endswith("gamma"):
            p.data[...] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith("beta") or name.endswith("bias"):
            p.data[...] = rng.normal(0, 0.1, p.shape)
    return module


def _check(name, fn, inputs, tol=TOL, max_coords=None):
    return grad_check(lambda: projection_loss(fn()), inputs, tolerance=tol, max_coords=max_coords, name=name)


def _t_matmul():
    a, b = _var((2, 4, 3), 0), _var((2, 3, 5), 1)
    return _check("matmul", lambda: T.matmul(a, b), [a, b])


def _t_softmax():
    x = _var((3, 5), 2)
    return _check("softmax", lambda: T.softmax_axis(x, axis=0), [x])


def _t_reductions():
    x = _var((3, 4, 5), 3)
    return [
        _check("reduce_sum", lambda: T.reduce_sum(x, axis=1), [x]),
        _check("reduce_mean", lambda: T.reduce_mean(x, axis=(0, 2)), [x]),
        _check("reduce_max", lambda: T.reduce_max(x, axis=1)[0], [x]),
        _check("reduce_max_k", lambda: T.reduce_max(x.reshape(1, 3, 4, 5), axis=2)[0], [x]),
    ]


def _t_cross_entropy():
    z = _var((4, 3), 4)
    labels = np.array([0, 2, 1, 2])
    return grad_check(lambda: loss_cross_entropy(z, labels), [z], tolerance=TOL, name="cross_entropy")


def _t_batchnorm():
    out = []
    for training in (False, True):
        bn = _perturb_params(BatchNorm(4, dtype=F64))
        bn.running_mean[:] = _rng(5).normal(size=4)
        bn.running_var[:] = _rng(6).uniform(0.5, 2.0, size=4)
        bn.train(training)
        x = _var((6, 4), 7)
        mean0, var0 = bn.running_mean.copy(), bn.running_var.copy()

        def run(bn=bn, x=x, mean0=mean0, var0=var0):
            bn.running_mean[:], bn.running_var[:] = mean0, var0
            return batchnorm_forward(bn, x, slope=0.2)

        name = "batchnorm_train" if training else "batchnorm_eval"
        out.append(_check(name, run, [x, bn.gamma, bn.beta]))
    return out


def _t_mlp():
    layer = _perturb_params(MlpLayer(3, 4, _rng(8), dtype=F64))
    x = _var((2, 5, 3), 9)
    return _check("mlp", lambda: mlp_forward(layer, x), [x] + layer.parameters())


def _t_lfc():
    layer = _perturb_params(LfcLayer(3, 4, 2, _rng(10), dtype=F64))
    x = _var((5, 2, 3), 11)
    return _check("lfc", lambda: lfc_forward(layer, x), [x] + layer.parameters())


def _graph_input(n=8, d=3, k=2, seed=12):
    x = _var((n, d), seed)
    return x, knn_search(x.data, k)


def _t_edgeconv():
    layer = _perturb_params(MlpLayer(6, 4, _rng(13), dtype=F64))
    x, nbr = _graph_input()
    return _check("edgeconv", lambda: edgeconv_forward(layer, x, nbr), [x] + layer.parameters())


def _t_edgelfc():
    layer = _perturb_params(LfcLayer(6, 4, 2, _rng(14), dtype=F64))
    x, nbr = _graph_input()
    return _check("edgelfc", lambda: edgelfc_forward(layer, x, nbr), [x] + layer.parameters())


def _caa_case(seed=15):
    layer = _perturb_params(CaaLayer(8, _rng(seed), ratio=4, dtype=F64), seed)
    return layer, _var((8, 5), seed + 1)


def _t_ccc():
    layer, f = _caa_case()
    return _check("ccc", lambda: ccc_compute(layer, f)[2], [f] + layer.mlp_q.parameters() + layer.mlp_k.parameters())


def _t_cae():
    s = _var((4, 4), 17)
    return _check("cae", lambda: cae_affinity(s), [s])


def _t_caa():
    layer, f = _caa_case(18)
    return _check("caa", lambda: caa_forward(layer, f), [f] + layer.parameters())


def _abem_case(seed=20):
    layer = _perturb_params(AbemLayer(3, 4, 2, 8, _rng(seed), dtype=F64), seed)
    x, nbr = _graph_input(seed=seed + 1)
    return layer, x, nbr


def _t_abem():
    layer, x, nbr = _abem_case()
    ps = [x] + layer.parameters()
    return [
        _check("abem_prominent", lambda: prominent_encode(layer, x, nbr), ps),
        _check("abem_finegrained", lambda: finegrained_encode(layer, x, nbr), ps),
        _check("abem", lambda: abem_forward(layer, x)[0], ps),
    ]


def _t_end_to_end():
    cfg = ModelConfig.reduced(3)
    model = _perturb_params(GbnetModel(cfg, dtype=F64), 30)
    pts = _rng(31).uniform(-1, 1, size=(2, cfg.num_points, 3))
    labels = np.array([0, 2])
    return grad_check(
        lambda: loss_cross_entropy(gbnet_forward(model, pts), labels),
        model.parameters(),
        step=STEP_END_TO_END,
        tolerance=TOL_END_TO_END,
        max_coords=400,
        name="end_to_end",
    )


TARGETS: dict[str, Callable] = {
    "matmul": _t_matmul,
    "softmax": _t_softmax,
    "reductions": _t_reductions,
    "cross_entropy": _t_cross_entropy,
    "batchnorm": _t_batchnorm,
    "mlp": _t_mlp,
    "lfc": _t_lfc,
    "edgeconv": _t_edgeconv,
    "edgelfc": _t_edgelfc,
    "ccc": _t_ccc,
    "cae": _t_cae,
    "caa": _t_caa,
    "abem": _t_abem,
    "end_to_end": _t_end_to_end,
}

# "caa" selects the whole attention family
GROUPS = {"caa": ("ccc", "cae", "caa"), "tensor": ("matmul", "softmax", "reductions", "cross_entropy", "batchnorm")}


def resolve_targets(names=None) -> list[str]:
    if not names:
        return list(TARGETS)
    out = []
    for n in names:
        if n in GROUPS:
            out.extend(GROUPS[n])
        elif n in TARGETS:
            out.append(n)
        else:
            raise KeyError(f"unknown gradcheck target {n!r}; choose from {sorted(set(TARGETS) | set(GROUPS))}")
    return list(dict.fromkeys(out))


def run_suite(names=None) -> tuple[list[GradCheckReport], float]:
    start = time.perf_counter()
    reports = []
    for name in resolve_targets(names):
        res = TARGETS[name]()
        reports.extend(res if isinstance(res, list) else [res])
    return reports, time.perf_counter() - start


@contextlib.contextmanager
def corrupted_backward(op_name: str | None = None, factor: float = 1.5):
    """Test hook: scale the first input gradient of ``op_name`` records
    (all records when None) so the suite must report a failure."""
    original = T._make

    def make(name, out, inputs, bwd):
        if op_name is None or name == op_name:

            def bad(g, bwd=bwd):
                grads = list(bwd(g))
                if grads and grads[0] is not None:
                    grads[0] = grads[0] * factor
                return tuple(grads)

            return original(name, out, inputs, bad)
        return original(name, out, inputs, bwd)

    T._make = make
    try:
        yield
    finally:
        T._make = original
