"""Finite-difference helpers shared by the test modules."""

from __future__ import annotations

import numpy as np

from intermode.tensor import Graph, numeric_grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-8)
    return float(np.max(np.abs(a - b))) / scale


def check_grads(build, params: dict[str, np.ndarray], h: float = 1e-3) -> float:
    """Largest relative error between tape gradients and central differences.

    ``build(graph) -> loss node``; runs in float64 so the finite-difference
    oracle is not dominated by rounding.
    """
    p64 = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    g = Graph(p64, dtype=np.float64)
    analytic = g.backward(build(g))

    def f(p):
        return float(build(Graph(p, dtype=np.float64)).value)

    numeric = numeric_grad(f, p64, h=h)
    return max(rel_err(analytic[k], numeric[k]) for k in p64)
