"""Orthographic five-view rendering and per-view heatmap encode/decode.

Coordinates are normalized to the cube [-1, 1]^3. Each view drops one axis:

=======  ==============  ==========  ==========
view     looks along     image axes  depth
=======  ==============  ==========  ==========
top      -z              (x, y)      2 - z
front    -x              (y, z)      2 - x
behind   +x              (y, z)      2 + x
left     -y              (x, z)      2 - y
right    +y              (x, z)      2 + y
=======  ==============  ==========  ==========

Depth is therefore in [1, 3] for occupied pixels and 0 marks an empty pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sim import ColoredPointCloud

VIEW_NAMES = ("top", "front", "behind", "left", "right")
# (row axis, col axis, depth axis, depth sign)
VIEW_AXES = ((0, 1, 2, -1), (1, 2, 0, -1), (1, 2, 0, 1), (0, 2, 1, -1), (0, 2, 1, 1))
CHANNELS = 7
LOG_FLOOR = 1e-9

__all__ = ["ColoredPointCloud", "ViewSet", "normalize_center", "normalize_frame",
           "denormalize", "project_views", "project_pixels", "pixel_centers",
           "encode_heatmap", "encode_heatmaps", "heatmap_scores", "decode_position",
           "candidate_grid", "VIEW_NAMES"]


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class ViewSet:
    views: np.ndarray  # (5, H, W, 7) float32
    center: np.ndarray
    scale: float

    @property
    def hw(self) -> tuple[int, int]:
        return self.views.shape[1], self.views.shape[2]


def normalize_center(cloud: ColoredPointCloud) -> tuple[ColoredPointCloud, np.ndarray, float]:
    center = cloud.points.mean(axis=0)
    shifted = cloud.points - center
    scale = float(np.max(np.abs(shifted)))
    if scale <= 0.0:
        raise ValueError("cannot normalize a cloud whose points are all identical")
    return ColoredPointCloud(shifted / scale, cloud.colors), center, scale


def normalize_frame(cloud: ColoredPointCloud, center: np.ndarray, scale: float) -> ColoredPointCloud:
    """Map into a fixed frame (e.g. the workspace cube) rather than the cloud's own."""
    return ColoredPointCloud((cloud.points - center) / scale, cloud.colors)


def denormalize(points: np.ndarray, center: np.ndarray, scale: float) -> np.ndarray:
    return np.asarray(points) * scale + center


def project_pixels(points: np.ndarray, H: int, W: int) -> np.ndarray:
    """Integer (view, n, 2) pixel coordinates, clipped into the image."""
    pts = np.atleast_2d(points)
    out = np.empty((len(VIEW_AXES), len(pts), 2), dtype=np.int64)
    for v, (ra, ca, _, _) in enumerate(VIEW_AXES):
        out[v, :, 0] = np.clip(np.floor((pts[:, ra] + 1.0) * 0.5 * H), 0, H - 1)
        out[v, :, 1] = np.clip(np.floor((pts[:, ca] + 1.0) * 0.5 * W), 0, W - 1)
    return out


def project_views(cloud: ColoredPointCloud, H: int = 32, W: int = 32,
                  center: np.ndarray | None = None, scale: float = 1.0) -> ViewSet:
    """Z-buffer the (already normalized) cloud into the five views.

    Ties at equal depth fall back to a lexicographic order on point and
    color, so the result never depends on input order.
    """
    pts, cols = cloud.points, cloud.colors
    pix = project_pixels(pts, H, W)
    views = np.zeros((len(VIEW_AXES), H, W, CHANNELS), dtype=np.float32)
    for v, (_, _, da, sign) in enumerate(VIEW_AXES):
        depth = 2.0 + sign * pts[:, da]
        flat = pix[v, :, 0] * W + pix[v, :, 1]
        keys = (cols[:, 2], cols[:, 1], cols[:, 0], pts[:, 2], pts[:, 1], pts[:, 0], depth, flat)
        order = np.lexsort(keys)
        first = np.ones(len(order), dtype=bool)
        first[1:] = flat[order][1:] != flat[order][:-1]
        win = order[first]
        r, c = pix[v, win, 0], pix[v, win, 1]
        views[v, r, c, 0:3] = cols[win]
        views[v, r, c, 3:6] = pts[win]
        views[v, r, c, 6] = depth[win]
    return ViewSet(views, np.zeros(3) if center is None else np.asarray(center, float), float(scale))


def pixel_centers(n: int) -> np.ndarray:
    return -1.0 + (np.arange(n) + 0.5) * (2.0 / n)


def encode_heatmap(p: np.ndarray, view: int, H: int = 32, W: int = 32,
                   sigma_px: float = 1.5) -> np.ndarray:
    """Truncated Gaussian bump (3 sigma) at the pixel ``p`` projects to, summing to 1."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(np.abs(p) > 1.0):
        raise ProjectionError(f"point {p.tolist()} projects outside the image")
    r0, c0 = project_pixels(p, H, W)[view, 0]
    if sigma_px <= 0:
        hm = np.zeros((H, W))
        hm[r0, c0] = 1.0
        return hm
    rr, cc = np.meshgrid(np.arange(H) - r0, np.arange(W) - c0, indexing="ij")
    d2 = rr.astype(np.float64) ** 2 + cc ** 2
    hm = np.exp(-0.5 * d2 / sigma_px ** 2)
    hm[d2 > (3.0 * sigma_px) ** 2] = 0.0
    return hm / hm.sum()


def encode_heatmaps(p: np.ndarray, H: int = 32, W: int = 32, sigma_px: float = 1.5) -> np.ndarray:
    return np.stack([encode_heatmap(p, v, H, W, sigma_px) for v in range(len(VIEW_AXES))])


def candidate_grid(n: int = 32) -> np.ndarray:
    """Pixel-center lattice of the normalized cube, (n^3, 3)."""
    c = pixel_centers(n)
    g = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def heatmap_scores(heatmaps: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Sum over views of log(heatmap value at each candidate's pixel + floor)."""
    _, H, W = heatmaps.shape
    pix = project_pixels(candidates, H, W)
    logs = np.log(np.asarray(heatmaps, dtype=np.float64) + LOG_FLOOR)
    score = np.zeros(len(candidates))
    for v in range(len(VIEW_AXES)):
        score += logs[v, pix[v, :, 0], pix[v, :, 1]]
    return score


def decode_position(heatmaps: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Best-scoring candidate; the lowest index wins ties."""
    if len(candidates) < 1:
        raise ValueError("need at least one candidate")
    return np.asarray(candidates[int(np.argmax(heatmap_scores(heatmaps, candidates)))], dtype=np.float64)
