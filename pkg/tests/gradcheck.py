"""Central finite-difference checking against the autodiff engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from wccn import autodiff as ad

EPS = 1e-6
REL_TOL = 1e-4


def numeric_grad(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], k: int,
                 eps: float = EPS) -> np.ndarray:
    x = arrays[k]
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        hi = f(arrays)
        x[i] = old - eps
        lo = f(arrays)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def check(build: Callable[..., ad.Tensor], arrays: Sequence[np.ndarray],
          wrt: Sequence[int] | None = None) -> float:
    """Largest relative error between analytic and numeric gradients of a scalar ``build(*tensors)``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt

    def value(arrs):
        with ad.new_graph():
            return float(build(*[ad.Tensor(a) for a in arrs]).data.reshape(-1)[0])

    with ad.new_graph():
        ts = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = build(*ts)
        ad.backward(out)
    worst = 0.0
    for k in wrt:
        analytic = ts[k].grad if ts[k].grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, rel_error(analytic, numeric_grad(value, arrays, k)))
    return worst


def scalarize(t: ad.Tensor, rng: np.random.Generator) -> ad.Tensor:
    """Random linear functional of ``t`` so every output element contributes."""
    w = rng.standard_normal(t.shape)
    return ad.sum_axis(ad.mul(t, w))


def away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def distinct(rng: np.random.Generator, shape, gap: float = 1e-3) -> np.ndarray:
    """Values with pairwise gaps >= ``gap`` so max/argmax are stable under the FD step."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap * 10 + rng.uniform(0, gap, n)).reshape(shape) - n * gap * 5
