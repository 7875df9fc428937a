"""Lloyd k-means with kmeans++ initialization.

Assignments are computed in fixed-size blocks so memory stays bounded and
floating-point reductions happen in a fixed order (reproducible for a given
seed). Empty clusters are re-seeded by splitting the largest cluster at its
farthest member. A two-stage variant handles very large k (e.g. 65536
centroids) by clustering into 256 groups first and subdividing each group.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import VectorSet


@dataclass
class KMeansCodebook:
    centroids: np.ndarray  # (k, dim) float32
    objective_history: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _as_array(data) -> np.ndarray:
    if isinstance(data, VectorSet):
        return data.data
    return np.ascontiguousarray(data, dtype=np.float32)


def nearest_centroids(data, centroids: np.ndarray,
                      point_block: int = 4096, cent_block: int = 8192):
    """Blocked nearest-centroid assignment: (labels, squared distances)."""
    x = _as_array(data)
    c = np.ascontiguousarray(centroids, dtype=np.float32)
    n, k = x.shape[0], c.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    best = np.full(n, np.inf, dtype=np.float32)
    c2 = (c.astype(np.float64) ** 2).sum(axis=1).astype(np.float32)
    for lo in range(0, n, point_block):
        hi = min(lo + point_block, n)
        xb = x[lo:hi]
        x2 = (xb.astype(np.float64) ** 2).sum(axis=1).astype(np.float32)
        for clo in range(0, k, cent_block):
            chi = min(clo + cent_block, k)
            d2 = x2[:, None] - 2.0 * (xb @ c[clo:chi].T) + c2[None, clo:chi]
            arg = d2.argmin(axis=1)
            val = np.take_along_axis(d2, arg[:, None], axis=1).ravel()
            better = val < best[lo:hi]
            labels[lo:hi][better] = arg[better] + clo
            best[lo:hi][better] = val[better]
    np.maximum(best, 0.0, out=best)
    return labels, best


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float32)
    first = int(rng.integers(n))
    centroids[0] = x[first]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1).astype(np.float64)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[i] = x[idx]
        nd = ((x - centroids[i]) ** 2).sum(axis=1)
        np.minimum(d2, nd, out=d2)
    return centroids


def _update_centroids(x: np.ndarray, labels: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    sums = np.empty((k, x.shape[1]), dtype=np.float64)
    for j in range(x.shape[1]):
        sums[:, j] = np.bincount(labels, weights=x[:, j], minlength=k)
    denom = np.maximum(counts, 1)[:, None]
    return (sums / denom).astype(np.float32), counts


def _reseed_empty(centroids: np.ndarray, counts: np.ndarray,
                  x: np.ndarray, labels: np.ndarray, d2: np.ndarray) -> int:
    """Move each empty cluster to the farthest point of the currently largest one."""
    empties = np.flatnonzero(counts == 0)
    if empties.size == 0:
        return 0
    counts = counts.copy()
    d2 = d2.copy()
    for e in empties:
        donor = int(counts.argmax())
        members = np.flatnonzero(labels == donor)
        far = members[int(d2[members].argmax())]
        centroids[e] = x[far]
        d2[far] = -1.0  # do not reuse the same point for another empty cluster
        counts[donor] -= 1
        counts[e] += 1
    return int(empties.size)


def kmeans_train(data, k: int, iters: int = 25, seed: int = 0) -> KMeansCodebook:
    """kmeans++ init followed by `iters` Lloyd iterations.

    The recorded objective (mean squared distance to the nearest centroid)
    is non-increasing across iterations.
    """
    x = _as_array(data)
    if not np.isfinite(x).all():
        raise ValueError("k-means input contains NaN or Inf")
    if k <= 0 or k > x.shape[0]:
        raise ValueError(f"k={k} must be in 1..{x.shape[0]}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(x, k, rng)
    history: list[float] = []
    for _ in range(iters):
        labels, d2 = nearest_centroids(x, centroids)
        history.append(float(d2.mean()))
        new_centroids, counts = _update_centroids(x, labels, k)
        keep = counts > 0
        centroids[keep] = new_centroids[keep]
        _reseed_empty(centroids, counts, x, labels, d2)
    labels, d2 = nearest_centroids(x, centroids)
    history.append(float(d2.mean()))
    return KMeansCodebook(centroids, history)


def kmeans_train_two_stage(data, k: int, iters: int = 25, seed: int = 0,
                           branch: int = 256, refine_iters: int = 2) -> KMeansCodebook:
    """Two-stage k-means for large k: cluster into `branch` groups, subdivide
    each group proportionally to its size, then run a few full Lloyd passes.
    """
    x = _as_array(data)
    if k <= branch or x.shape[0] < 4 * branch:
        return kmeans_train(x, k, iters, seed)
    stage1 = kmeans_train(x, branch, iters, seed)
    labels, _ = nearest_centroids(x, stage1.centroids)
    counts = np.bincount(labels, minlength=branch)
    # proportional allocation of sub-centroids, capped by group size
    alloc = np.maximum(1, np.round(k * counts / counts.sum()).astype(np.int64))
    alloc = np.minimum(alloc, np.maximum(counts, 1))
    while alloc.sum() != k:
        gap = k - int(alloc.sum())
        room = (alloc < counts) if gap > 0 else (alloc > 1)
        idx = int(np.flatnonzero(room)[np.argmax((counts - alloc)[room] if gap > 0 else alloc[room])])
        alloc[idx] += 1 if gap > 0 else -1
    parts = []
    for c in range(branch):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        sub_k = int(alloc[c])
        if sub_k >= members.size:
            parts.append(x[members[:sub_k]])
        else:
            sub = kmeans_train(x[members], sub_k, iters=10, seed=seed + 1 + c)
            parts.append(sub.centroids)
    centroids = np.concatenate(parts, axis=0)
    if centroids.shape[0] != k:  # only possible if some groups were empty
        pad = kmeans_train(x, k - centroids.shape[0], iters=5, seed=seed + 7)
        centroids = np.concatenate([centroids, pad.centroids], axis=0)
    history: list[float] = []
    for _ in range(refine_iters):
        labels, d2 = nearest_centroids(x, centroids)
        history.append(float(d2.mean()))
        new_centroids, counts = _update_centroids(x, labels, k)
        keep = counts > 0
        centroids[keep] = new_centroids[keep]
        _reseed_empty(centroids, counts, x, labels, d2)
    labels, d2 = nearest_centroids(x, centroids)
    history.append(float(d2.mean()))
    return KMeansCodebook(centroids, history)
