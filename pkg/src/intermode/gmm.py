"""Diagonal-covariance Gaussian mixtures fitted by EM."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .tensor.serialize import checkpoint_bytes, parse_checkpoint

RIDGE = 1e-6
log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d)
    ll_history: tuple[float, ...] = field(default=(), compare=False)

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_log_density(self, x: np.ndarray) -> np.ndarray:
        """(N, K) log pi_k + log N(x; mu_k, diag var_k)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        var = self.variances
        diff = x[:, None, :] - self.means[None]
        quad = np.sum(diff * diff / var[None], axis=2)
        norm = np.sum(np.log(2 * np.pi * var), axis=1)
        return np.log(self.weights)[None] - 0.5 * (quad + norm[None])

    def to_tensors(self, prefix: str = "gmm") -> dict[str, np.ndarray]:
        return {f"{prefix}.weights": self.weights, f"{prefix}.means": self.means,
                f"{prefix}.variances": self.variances}

    @classmethod
    def from_tensors(cls, tensors: dict, prefix: str = "gmm") -> "GmmModel":
        return cls(np.asarray(tensors[f"{prefix}.weights"], np.float64),
                   np.asarray(tensors[f"{prefix}.means"], np.float64),
                   np.asarray(tensors[f"{prefix}.variances"], np.float64))

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(self.to_tensors())

    @classmethod
    def from_bytes(cls, data: bytes) -> "GmmModel":
        return cls.from_tensors(parse_checkpoint(data))


def responsibilities(model: GmmModel, x: np.ndarray) -> np.ndarray:
    logp = model.component_log_density(x)
    return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))


def log_likelihood(model: GmmModel, data: np.ndarray) -> float:
    return float(np.sum(logsumexp(model.component_log_density(data), axis=1)))


def predict(model: GmmModel, x: np.ndarray) -> np.ndarray:
    return np.argmax(model.component_log_density(x), axis=1)


def sample(model: GmmModel, n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    comp = rng.choice(model.K, size=n, p=model.weights / model.weights.sum())
    noise = rng.standard_normal((n, model.dim))
    return model.means[comp] + noise * np.sqrt(model.variances[comp])


def _kmeans_pp(data: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [data[rng.integers(len(data))]]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.choice(len(data), p=d2 / total) if total > 0 else rng.integers(len(data))
        centers.append(data[idx])
        d2 = np.minimum(d2, np.sum((data - data[idx]) ** 2, axis=1))
    return np.array(centers)


def _fit_once(data: np.ndarray, K: int, max_iter: int, tol: float,
              rng: np.random.Generator) -> GmmModel:
    N, d = data.shape
    global_var = data.var(axis=0) + RIDGE
    model = GmmModel(np.full(K, 1.0 / K), _kmeans_pp(data, K, rng), np.tile(global_var, (K, 1)))
    history: list[float] = []
    for _ in range(max_iter):
        logp = model.component_log_density(data)
        row = logsumexp(logp, axis=1, keepdims=True)
        history.append(float(row.sum()))
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol * N:
            break
        resp = np.exp(logp - row)
        nk = resp.sum(axis=0)
        means = model.means.copy()
        variances = model.variances.copy()
        alive = nk > 1e-10
        means[alive] = (resp.T @ data)[alive] / nk[alive, None]
        for k in np.flatnonzero(alive):
            diff = data - means[k]
            variances[k] = resp[:, k] @ (diff * diff) / nk[k] + RIDGE
        if not alive.all():
            # move dead components onto the worst-explained points
            dist = np.min(np.sum((data[:, None] - means[alive][None]) ** 2, axis=2), axis=1)
            for k in np.flatnonzero(~alive):
                far = int(np.argmax(dist))
                log.info("reseeding empty GMM component %d at point %d", k, far)
                means[k], variances[k] = data[far], global_var
                dist[far] = -1.0
            nk = np.maximum(nk, 1.0)
        model = GmmModel(nk / nk.sum(), means, variances)
    return GmmModel(model.weights, model.means, model.variances, tuple(history))


def fit_em(data: np.ndarray, K: int, max_iter: int = 200, tol: float = 1e-6,
           seed: int = 0, restarts: int = 3) -> GmmModel:
    """EM with k-means++ starts; the restart with the highest final log-likelihood wins.

    ``tol`` bounds the per-point change in log-likelihood.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or len(data) < K:
        raise ValueError(f"need an (N, d) array with N >= K={K}")
    best = None
    for r in range(restarts):
        m = _fit_once(data, K, max_iter, tol, np.random.default_rng([seed, r]))
        ll = log_likelihood(m, data)
        if best is None or ll > best[0]:
            best = (ll, m)
    return best[1]
