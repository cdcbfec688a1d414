"""Cross-scene keypoints from cyclic mutual nearest neighbours in feature space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import FeaturedCloud, knn_batch, stack_dim

DEFAULT_KNN = 3
DEFAULT_MAX_KEYPOINTS = 512


class EmptyKeypointsError(RuntimeError):
    """No feature chain survived the cyclic consistency test."""


@dataclass(frozen=True)
class KeypointCorrespondence:
    indices: np.ndarray    # (K, I), column i indexes scene i in the caller's order
    order: tuple[int, ...]  # cycle order used for the selection

    @property
    def count(self) -> int:
        return self.indices.shape[0]

    @property
    def scenes(self) -> int:
        return self.indices.shape[1]

    def points(self, clouds, scene: int) -> np.ndarray:
        return clouds[scene].points[self.indices[:, scene]]


def scene_order(n_scenes: int, seed: int) -> tuple[int, ...]:
    return tuple(int(i) for i in np.random.default_rng(seed).permutation(n_scenes))


def _farthest_point_rows(feats: np.ndarray, count: int) -> np.ndarray:
    # start from the row farthest from the mean so the pick does not depend on row order
    d_mean = ((feats - feats.mean(0)) ** 2).sum(1)
    chosen = [int(np.argmax(d_mean))]
    dist = ((feats - feats[chosen[0]]) ** 2).sum(1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, ((feats - feats[nxt]) ** 2).sum(1))
    return np.array(sorted(chosen))


def select_keypoints(clouds: list[FeaturedCloud], k_nn: int = DEFAULT_KNN, seed: int = 0,
                     max_keypoints: int = DEFAULT_MAX_KEYPOINTS) -> KeypointCorrespondence:
    """Follow feature nearest-neighbour hops around a seeded cycle of scenes.

    A chain starting at point a0 of the first scene in the cycle is kept when it
    returns to a0 and, for every adjacent pair (wrap-around included), each
    point is among the ``k_nn`` feature neighbours of its successor's point.
    """
    n_scenes = len(clouds)
    if n_scenes < 2:
        raise ValueError("keypoint selection needs at least two scenes")
    if k_nn < 1:
        raise ValueError("k_nn must be >= 1")
    stack_dim(clouds)
    order = scene_order(n_scenes, seed)
    feats = [clouds[i].features for i in order]

    chain = [np.arange(feats[0].shape[0])]
    for s in range(1, n_scenes):
        chain.append(knn_batch(feats[s], feats[s - 1][chain[-1]], 1)[:, 0])
    back = knn_batch(feats[0], feats[-1][chain[-1]], 1)[:, 0]
    keep = back == chain[0]

    for s in range(n_scenes):
        succ = (s + 1) % n_scenes
        kk = min(k_nn, feats[s].shape[0])
        neigh = knn_batch(feats[s], feats[succ][chain[succ]], kk)
        keep &= (neigh == chain[s][:, None]).any(1)

    rows = np.stack([c[keep] for c in chain], 1)  # columns in cycle order
    if rows.shape[0] == 0:
        raise EmptyKeypointsError("cyclic MNN kept no keypoints; scenes share no consistent features")
    if rows.shape[0] > max_keypoints:
        rows = rows[_farthest_point_rows(feats[0][rows[:, 0]], max_keypoints)]
    rows = rows[np.argsort(rows[:, 0], kind="stable")]
    indices = np.empty_like(rows)
    for pos, scene in enumerate(order):
        indices[:, scene] = rows[:, pos]
    return KeypointCorrespondence(indices, order)

