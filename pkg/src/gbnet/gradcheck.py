"""Central finite-difference verification of recorded gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, record_decisions


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    n_checked: int
    n_excluded: int
    tolerance: float
    worst: tuple | None = None
    excluded: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_err <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name:<28} max_rel_err={self.max_rel_err:.3e} "
            f"tol={self.tolerance:.0e} checked={self.n_checked} excluded={self.n_excluded}"
        )


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _same(d1: list, d2: list) -> bool:
    return len(d1) == len(d2) and all(
        x.shape == y.shape and np.array_equal(x, y) for x, y in zip(d1, d2)
    )


def _pick_coords(inputs, max_coords, rng):
    sizes = [x.size for x in inputs]
    total = sum(sizes)
    coords = []
    if max_coords is None or total <= max_coords:
        for t, n in enumerate(sizes):
            coords.extend((t, i) for i in range(n))
        return coords
    # at least one coordinate per tensor, the rest proportional to size
    for t, n in enumerate(sizes):
        m = max(1, int(round(max_coords * n / total)))
        picks = rng.choice(n, size=min(m, n), replace=False)
        coords.extend((t, int(i)) for i in np.sort(picks))
    return coords


def grad_check(
    f: Callable[[], Tensor],
    inputs: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    name: str = "",
) -> GradCheckReport:
    """Compare recorded gradients of ``f()`` w.r.t. ``inputs`` against
    (f(x+h) - f(x-h)) / 2h, one coordinate at a time.

    ``f`` takes no arguments and reads the inputs' current data, which is
    perturbed in place.  A coordinate whose perturbation changes any
    discrete choice (argmax, rectifier sign, neighbor set, point ordering)
    sits on a kink and is excluded from the error statistic.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for x in inputs:
        x.grad = None
    with record_decisions() as base_dec:
        with Tape():
            loss = f()
    backward(loss)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    rng = np.random.default_rng(seed)
    worst, max_err, n_checked = None, 0.0, 0
    excluded = []
    for t, i in _pick_coords(inputs, max_coords, rng):
        flat = inputs[t].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        with record_decisions() as dp:
            fp = f().item()
        flat[i] = orig - step
        with record_decisions() as dm:
            fm = f().item()
        flat[i] = orig
        if not (_same(dp, base_dec) and _same(dm, base_dec)):
            excluded.append((t, i))
            continue
        fd = (fp - fm) / (2.0 * step)
        an = float(analytic[t].reshape(-1)[i])
        err = rel_err(fd, an)
        n_checked += 1
        if err > max_err or worst is None:
            max_err = max(max_err, err)
            worst = (t, i, an, fd)
    return GradCheckReport(name, max_err, n_checked, len(excluded), tolerance, worst, excluded)


def projection_loss(out: Tensor, seed: int = 0, scale: float = 1e-2) -> Tensor:
    """Scalar sum(out * W) with fixed random W, scaled so the loss stays
    small and finite-difference rounding stays far below the tolerance."""
    w = np.random.default_rng(seed).standard_normal(out.shape) * (scale / np.sqrt(out.size))
    return (out * Tensor(w.astype(out.dtype))).sum()
