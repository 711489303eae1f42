"""Frozen image featurizer, task embeddings and the self-supervised success filter."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.ndimage import gaussian_filter

from .render import ViewSet

POOL_HW = 16
FEATURE_CHANNELS = (0, 1, 2, 6)  # RGB + depth
N_VIEWS = 5
MIN_NULL = 50
SMOOTH_PX = 4.0


def downsample(views: np.ndarray, out_hw: int = POOL_HW) -> np.ndarray:
    """Average-pool (5, H, W, 7) views to (5, out_hw, out_hw, 4) RGB+depth."""
    v = np.asarray(views, dtype=np.float64)
    if v.ndim != 4 or v.shape[0] != N_VIEWS or v.shape[3] < 7:
        raise ValueError(f"expected (5, H, W, 7) views, got {v.shape}")
    _, H, W, _ = v.shape
    if H % out_hw or W % out_hw:
        raise ValueError(f"view size {H}x{W} is not a multiple of {out_hw}")
    v = v[..., FEATURE_CHANNELS]
    return v.reshape(N_VIEWS, out_hw, H // out_hw, out_hw, W // out_hw, 4).mean(axis=(2, 4))


@dataclass(frozen=True)
class Featurizer:
    """Seeded random linear projection of pooled views; never trained.

    Each row is white Gaussian noise blurred over the image plane, so nearby
    pixels get correlated weights: a surface sliding by a few pixels moves the
    feature vector smoothly instead of scrambling it.
    """

    seed: int = 0
    d_z: int = 32
    pool_hw: int = POOL_HW
    smooth_px: float = SMOOTH_PX
    projection: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        shape = (self.d_z, N_VIEWS, self.pool_hw, self.pool_hw, 4)
        rng = np.random.default_rng([self.seed, 0xFEA7])
        white = rng.standard_normal(shape)
        if self.smooth_px > 0:
            white = gaussian_filter(white, sigma=(0, 0, self.smooth_px, self.smooth_px, 0), mode="constant")
        proj = white.reshape(self.d_z, -1)
        proj /= np.sqrt(np.mean(proj * proj) * proj.shape[1] / N_VIEWS)
        proj.setflags(write=False)
        object.__setattr__(self, "projection", proj)

    def _flat(self, obs) -> np.ndarray:
        views = obs.views if isinstance(obs, ViewSet) else obs
        return downsample(views, self.pool_hw).reshape(N_VIEWS, -1)

    def encode(self, obs) -> np.ndarray:
        return self.projection @ self._flat(obs).reshape(-1)

    def encode_per_view(self, obs) -> np.ndarray:
        """(5, d_z) per-view contributions; they sum to :meth:`encode`."""
        x = self._flat(obs)
        blocks = self.projection.reshape(self.d_z, N_VIEWS, -1)
        return np.einsum("dvk,vk->vd", blocks, x)

    def checksum(self) -> str:
        import hashlib
        return hashlib.sha256(np.ascontiguousarray(self.projection, dtype="<f8").tobytes()).hexdigest()


@dataclass(frozen=True)
class TaskEmbedding:
    z: np.ndarray
    source: str = ""

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.z))


def task_embedding(featurizer: Featurizer, init_obs, final_obs, source: str = "") -> TaskEmbedding:
    z = featurizer.encode(init_obs) - featurizer.encode(final_obs)
    return TaskEmbedding(z, source)


def success_filter(z, threshold: float) -> bool:
    vec = z.z if isinstance(z, TaskEmbedding) else np.asarray(z)
    return bool(np.linalg.norm(vec) > threshold)


def calibrate_threshold(null_embeddings: Iterable, quantile: float = 99.0) -> float:
    """Percentile of embedding norms over trajectories where nothing moved."""
    norms = []
    for z in null_embeddings:
        vec = z.z if isinstance(z, TaskEmbedding) else np.asarray(z, dtype=np.float64)
        norms.append(float(np.linalg.norm(vec)) if vec.ndim else abs(float(vec)))
    if len(norms) < MIN_NULL:
        raise ValueError(f"need at least {MIN_NULL} null trajectories, got {len(norms)}")
    return float(np.percentile(norms, quantile))
