"""Dataset containers, ANN benchmark file formats, synthetic data and exact
ground truth.

File formats follow the texmex/BIGANN convention: every record is a 4-byte
little-endian int32 dimension header followed by the components (float32 for
.fvecs, uint8 for .bvecs, int32 for .ivecs). All distances in this package
are squared Euclidean; nearest-neighbor ties break by ascending id.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

FORMATS = {
    "fvecs": np.float32,
    "bvecs": np.uint8,
    "ivecs": np.int32,
}


class DatasetError(ValueError):
    """Malformed vector file or inconsistent dataset arguments."""


@dataclass
class VectorSet:
    """Contiguous row-major collection of float32 vectors with implicit ids 0..count-1."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise DatasetError(f"expected 2-d array, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise DatasetError("vector set contains NaN or Inf components")

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def count(self) -> int:
        return self.data.shape[0]

    def __len__(self) -> int:
        return self.count


@dataclass
class GroundTruth:
    """Exact neighbor ids per query, ordered by increasing squared L2 distance.

    Ties are broken by ascending id so that ground truth is unique.
    """

    neighbors: np.ndarray  # (query_count, depth) int32
    distances: np.ndarray | None = None  # optional (query_count, depth) float

    def __post_init__(self) -> None:
        self.neighbors = np.ascontiguousarray(self.neighbors, dtype=np.int32)
        if self.neighbors.ndim != 2:
            raise DatasetError("ground truth must be a 2-d id array")

    @property
    def query_count(self) -> int:
        return self.neighbors.shape[0]

    @property
    def depth(self) -> int:
        return self.neighbors.shape[1]


def read_vectors(path: str | os.PathLike, fmt: str | None = None,
                 allow_empty: bool = False) -> VectorSet:
    """Read an .fvecs/.bvecs/.ivecs file into a VectorSet.

    The format is inferred from the extension unless `fmt` is given. bvecs
    and ivecs components are widened to float32 without scaling. Every
    record must carry the same dimension header.
    """
    path = os.fspath(path)
    if fmt is None:
        fmt = os.path.splitext(path)[1].lstrip(".")
    if fmt not in FORMATS:
        raise DatasetError(f"unknown vector format {fmt!r}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        if allow_empty:
            return VectorSet(np.empty((0, 0), dtype=np.float32))
        raise DatasetError(f"{path}: empty vector file")
    if raw.size < 4:
        raise DatasetError(f"{path}: truncated file")
    dim = int(raw[:4].view(np.int32)[0])
    if dim <= 0:
        raise DatasetError(f"{path}: non-positive dimension header {dim}")
    itemsize = np.dtype(FORMATS[fmt]).itemsize
    rec_bytes = 4 + dim * itemsize
    if raw.size % rec_bytes != 0:
        raise DatasetError(
            f"{path}: file size {raw.size} is not a multiple of record size {rec_bytes}")
    count = raw.size // rec_bytes
    recs = raw.reshape(count, rec_bytes)
    headers = recs[:, :4].copy().view(np.int32).ravel()
    if not (headers == dim).all():
        bad = int(np.flatnonzero(headers != dim)[0])
        raise DatasetError(
            f"{path}: record {bad} has dimension {int(headers[bad])}, expected {dim}")
    body = recs[:, 4:].copy().view(FORMATS[fmt])
    return VectorSet(body.astype(np.float32))


def write_vectors(path: str | os.PathLike, vs: VectorSet, fmt: str | None = None) -> None:
    """Write a VectorSet in .fvecs/.bvecs/.ivecs format (bit-exact round trip)."""
    path = os.fspath(path)
    if fmt is None:
        fmt = os.path.splitext(path)[1].lstrip(".")
    if fmt not in FORMATS:
        raise DatasetError(f"unknown vector format {fmt!r}")
    body = vs.data.astype(FORMATS[fmt])
    headers = np.full((vs.count, 1), vs.dim, dtype=np.int32)
    with open(path, "wb") as f:
        out = np.concatenate(
            [headers.view(np.uint8), body.view(np.uint8).reshape(vs.count, -1)], axis=1)
        out.tofile(f)


def write_ground_truth(path: str | os.PathLike, gt: GroundTruth) -> None:
    """Write ground-truth ids as an .ivecs file."""
    ids = gt.neighbors.astype(np.int32)
    headers = np.full((ids.shape[0], 1), ids.shape[1], dtype=np.int32)
    out = np.concatenate([headers.view(np.uint8), ids.view(np.uint8).reshape(ids.shape[0], -1)], axis=1)
    out.tofile(os.fspath(path))


def read_ground_truth(path: str | os.PathLike) -> GroundTruth:
    """Read ground-truth ids from an .ivecs file."""
    vs = read_vectors(path, fmt="ivecs")
    return GroundTruth(vs.data.astype(np.int32))


def synth_dataset(n: int, d: int, clusters: int, seed: int) -> VectorSet:
    """Gaussian-mixture synthetic data: centers ~ N(0, I), points ~ center + N(0, 0.1 I).

    Sampled centers are de-meaned so the mixture is exactly centered, and
    points are assigned to centers round-robin (clusters=n gives every point
    its own center). Deterministic for a fixed seed.
    """
    if n <= 0 or d <= 0 or clusters <= 0:
        raise DatasetError("n, d and clusters must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((clusters, d))
    centers -= centers.mean(axis=0)
    assign = np.arange(n) % clusters
    pts = centers[assign] + rng.standard_normal((n, d)) * np.sqrt(0.1)
    return VectorSet(pts.astype(np.float32))


def synth_manifold(n: int, d: int, intrinsic_dim: int, seed: int,
                   noise: float = 0.01) -> VectorSet:
    """Synthetic data with low intrinsic dimension, mimicking learned descriptors.

    Latent points are drawn i.i.d. N(0, I) in `intrinsic_dim` dimensions,
    mapped through a fixed random quadratic feature map into d dimensions,
    and perturbed with small ambient noise. Densely sampled low-dimensional
    data is what makes neighbor-based reconstruction informative; plain
    Gaussian mixtures have i.i.d. full-rank noise that neighbors cannot
    predict.
    """
    if intrinsic_dim <= 0 or intrinsic_dim > d:
        raise DatasetError("intrinsic_dim must be in 1..d")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, intrinsic_dim)).astype(np.float32)
    lin = rng.standard_normal((intrinsic_dim, d)).astype(np.float32) / np.sqrt(intrinsic_dim)
    quad = rng.standard_normal((intrinsic_dim, d)).astype(np.float32) / intrinsic_dim
    x = z @ lin + np.tanh(z) @ quad
    x += rng.standard_normal((n, d)).astype(np.float32) * noise
    return VectorSet(x)


def squared_distances(queries: np.ndarray, base: np.ndarray) -> np.ndarray:
    """All-pairs squared L2 distances, float64 accumulation, (nq, nb)."""
    q = queries.astype(np.float64)
    b = base.astype(np.float64)
    d2 = (q * q).sum(axis=1)[:, None] - 2.0 * (q @ b.T) + (b * b).sum(axis=1)[None, :]
    np.maximum(d2, 0.0, out=d2)
    return d2


def brute_force_knn(base: VectorSet, queries: VectorSet, k: int,
                    block: int = 256) -> GroundTruth:
    """Exact k nearest neighbors under squared L2, ties by ascending id.

    Blocked over queries so memory stays bounded; results are independent
    of the block size.
    """
    if base.dim != queries.dim:
        raise DatasetError(f"dimension mismatch: base {base.dim} vs queries {queries.dim}")
    if k > base.count:
        raise DatasetError(f"k={k} exceeds base count {base.count}")
    nq = queries.count
    ids = np.empty((nq, k), dtype=np.int32)
    dists = np.empty((nq, k), dtype=np.float64)
    for lo in range(0, nq, block):
        hi = min(lo + block, nq)
        d2 = squared_distances(queries.data[lo:hi], base.data)
        if k < base.count:
            part = np.argpartition(d2, k, axis=1)[:, :k]
            thr = np.take_along_axis(d2, part, axis=1).max(axis=1)
        else:
            thr = d2.max(axis=1)
        for r in range(hi - lo):
            # candidates cover every boundary tie; flatnonzero yields ascending
            # ids, so a stable sort by distance realizes the tie-break rule
            cand = np.flatnonzero(d2[r] <= thr[r])
            order = np.argsort(d2[r, cand], kind="stable")[:k]
            ids[lo + r] = cand[order]
            dists[lo + r] = d2[r, cand[order]]
    return GroundTruth(ids, dists)
