"""Featured point clouds, exact nearest neighbours and the inverse-distance field."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .numerics import DTYPE, as_tensor, pairwise_sqdist

DEFAULT_EPSILON = 1e-8  # m^2, keeps 1/(d^2 + eps) finite on scene points
EXHAUSTIVE_LIMIT = 4096


@dataclass(frozen=True, eq=False)
class FeaturedCloud:
    points: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be N x 3, got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("a cloud needs at least one point")
        if feats.shape[0] != pts.shape[0]:
            raise ValueError(f"{pts.shape[0]} points but {feats.shape[0]} feature rows")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "_points_t", torch.from_numpy(pts.copy()))
        object.__setattr__(self, "_features_t", torch.from_numpy(feats.copy()))
        pts.setflags(write=False)
        feats.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "features", feats)
        if self.labels is not None:
            labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if labels.shape != (pts.shape[0],):
                raise ValueError("labels must have one entry per point")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def points_t(self) -> torch.Tensor:
        return self._points_t

    def features_t(self) -> torch.Tensor:
        return self._features_t

    def transformed(self, rotation: np.ndarray, translation) -> "FeaturedCloud":
        pts = self.points @ np.asarray(rotation, dtype=np.float64).T + np.asarray(translation, dtype=np.float64)
        return FeaturedCloud(pts, self.features, self.labels)

    def permuted(self, perm) -> "FeaturedCloud":
        perm = np.asarray(perm)
        labels = None if self.labels is None else self.labels[perm]
        return FeaturedCloud(self.points[perm], self.features[perm], labels)


def _sorted_by_distance(sq: np.ndarray, k: int) -> np.ndarray:
    # stable sort -> ties resolved toward the lower index
    return np.argsort(sq, kind="stable")[:k]


def knn(cloud: FeaturedCloud, center, k: int, metric: str = "spatial") -> np.ndarray:
    """Indices of the k nearest points to ``center``, nearest first, ties by index.

    ``metric="spatial"`` measures from a 3D point, ``"feature"`` from a C-vector.
    """
    if metric == "spatial":
        data = cloud.points
    elif metric == "feature":
        data = cloud.features
    else:
        raise ValueError(f"unknown metric {metric!r}")
    if not 1 <= k <= cloud.n:
        raise ValueError(f"k={k} outside [1, {cloud.n}]")
    center = np.asarray(center, dtype=np.float64).reshape(-1)
    if center.shape[0] != data.shape[1]:
        raise ValueError(f"center has dimension {center.shape[0]}, cloud has {data.shape[1]}")
    if cloud.n <= EXHAUSTIVE_LIMIT:
        diff = data - center
        return _sorted_by_distance((diff * diff).sum(1), k)
    return knn_batch(data, center[None], k)[0]


def knn_batch(data: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest rows of ``data`` for every row of ``centers`` (M x k)."""
    data = np.asarray(data, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    n = data.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    if n <= EXHAUSTIVE_LIMIT:
        out = np.empty((centers.shape[0], k), dtype=np.int64)
        chunk = max(1, 2 ** 22 // (n * max(1, data.shape[1])))
        for s in range(0, centers.shape[0], chunk):
            diff = centers[s:s + chunk, None, :] - data[None]
            sq = (diff * diff).sum(-1)
            out[s:s + chunk] = np.argsort(sq, axis=1, kind="stable")[:, :k]
        return out
    # kd-tree is exact; over-fetch a little so boundary ties can be re-sorted by index
    tree = cKDTree(data)
    extra = min(n, k + 8)
    _, idx = tree.query(centers, k=extra)
    idx = np.atleast_2d(idx)
    out = np.empty((centers.shape[0], k), dtype=np.int64)
    for r, (c, cand) in enumerate(zip(centers, idx)):
        diff = data[cand] - c
        sq = (diff * diff).sum(1)
        order = np.lexsort((cand, sq))
        out[r] = cand[order[:k]]
    return out


def idw_weights(cloud: FeaturedCloud, q, epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    """Normalised inverse-squared-distance weights; q may be (3,) or (..., 3)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    q = as_tensor(q)
    inv = 1.0 / (pairwise_sqdist(q, cloud.points_t()) + epsilon)
    return inv / inv.sum(-1, keepdim=True)


def idw_log_weights(points: torch.Tensor, q: torch.Tensor, epsilon: float) -> torch.Tensor:
    """log of :func:`idw_weights`, computed stably from the same distances."""
    logits = -torch.log(pairwise_sqdist(q, points) + epsilon)
    return logits - torch.logsumexp(logits, -1, keepdim=True)


def idw_feature(cloud: FeaturedCloud, q, epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    """Inverse-distance-weighted feature at q (C,) or at a batch of queries (..., C)."""
    return idw_weights(cloud, q, epsilon) @ cloud.features_t()


def stack_dim(clouds) -> int:
    dims = {c.dim for c in clouds}
    if len(dims) != 1:
        raise ValueError(f"clouds disagree on feature dimension: {sorted(dims)}")
    return dims.pop()


__all__ = [
    "DEFAULT_EPSILON", "DTYPE", "FeaturedCloud", "idw_feature", "idw_log_weights",
    "idw_weights", "knn", "knn_batch", "stack_dim",
]
