"""Product quantization: per-sub-space codebooks, packed codes, and the
alternating rotation optimizer.

Sub-code ids are packed in little-endian bit order and padded to whole bytes
per vector, so bits per sub-code may be 8, 12, 14 or 16. The rotation
optimizer alternates Lloyd steps on rotated data with an orthogonal
Procrustes update (polar factor of the data/reconstruction cross-covariance),
which makes the reconstruction error non-increasing across outer iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kmeans import kmeans_train, kmeans_train_two_stage, nearest_centroids, \
    _update_centroids, _reseed_empty

LARGE_K_THRESHOLD = 4096  # sub-codebooks at least this big train two-stage by default


def pack_codes(ids: np.ndarray, bits: int) -> np.ndarray:
    """Pack (n, m) sub-code ids into (n, ceil(m*bits/8)) bytes, little-endian bit order."""
    n, m = ids.shape
    nbytes = (m * bits + 7) // 8
    shifts = np.arange(bits, dtype=np.uint32)
    bit_arr = ((ids[:, :, None].astype(np.uint32) >> shifts) & 1).astype(np.uint8)
    packed = np.packbits(bit_arr.reshape(n, m * bits), axis=1, bitorder="little")
    return np.ascontiguousarray(packed[:, :nbytes])


def unpack_codes(codes: np.ndarray, m: int, bits: int) -> np.ndarray:
    """Inverse of pack_codes: (n, code_bytes) bytes back to (n, m) ids."""
    n = codes.shape[0]
    flat = np.unpackbits(codes, axis=1, bitorder="little")[:, :m * bits]
    weights = (np.uint32(1) << np.arange(bits, dtype=np.uint32))
    ids = (flat.reshape(n, m, bits).astype(np.uint32) * weights).sum(axis=2)
    return ids.astype(np.int64)


@dataclass
class ProductQuantizer:
    """m sub-quantizers of 2**bits centroids over equal slices of the input."""

    codebooks: np.ndarray  # (m, 2**bits, sub_dim) float32
    bits: int
    objective_history: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.codebooks = np.ascontiguousarray(self.codebooks, dtype=np.float32)
        if self.codebooks.shape[1] != 1 << self.bits:
            raise ValueError(
                f"codebooks hold {self.codebooks.shape[1]} entries, expected {1 << self.bits}")

    @property
    def m(self) -> int:
        return self.codebooks.shape[0]

    @property
    def sub_dim(self) -> int:
        return self.codebooks.shape[2]

    @property
    def dim(self) -> int:
        return self.m * self.sub_dim

    @property
    def code_bytes(self) -> int:
        return (self.m * self.bits + 7) // 8

    def _check_dim(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float32)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.dim:
            raise ValueError(f"vector dim {x.shape[1]} != quantizer dim {self.dim}")
        return x

    def encode_ids(self, x: np.ndarray) -> np.ndarray:
        """Nearest sub-centroid id per sub-space, (n, m) int64."""
        x = self._check_dim(x)
        ids = np.empty((x.shape[0], self.m), dtype=np.int64)
        for j in range(self.m):
            sl = slice(j * self.sub_dim, (j + 1) * self.sub_dim)
            ids[:, j], _ = nearest_centroids(x[:, sl], self.codebooks[j])
        return ids

    def decode_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        out = np.empty((ids.shape[0], self.dim), dtype=np.float32)
        for j in range(self.m):
            sl = slice(j * self.sub_dim, (j + 1) * self.sub_dim)
            out[:, sl] = self.codebooks[j][ids[:, j]]
        return out

    def encode(self, x: np.ndarray) -> np.ndarray:
        return pack_codes(self.encode_ids(x), self.bits)

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.uint8)
        if codes.ndim == 1:
            codes = codes[None, :]
        return self.decode_ids(unpack_codes(codes, self.m, self.bits))

    def reconstruction_mse(self, x: np.ndarray) -> float:
        x = self._check_dim(x)
        err = x - self.decode_ids(self.encode_ids(x))
        return float((err.astype(np.float64) ** 2).sum(axis=1).mean())


def pq_train(data: np.ndarray, m: int, bits: int, iters: int = 25, seed: int = 0,
             exact_large_k: bool = False) -> ProductQuantizer:
    """Train one k-means codebook per sub-space. dim must be divisible by m."""
    x = np.ascontiguousarray(data, dtype=np.float32)
    if x.shape[1] % m != 0:
        raise ValueError(f"dim {x.shape[1]} not divisible by m={m}")
    k = 1 << bits
    if x.shape[0] < k:
        raise ValueError(f"{x.shape[0]} training points for {k} centroids per sub-space")
    sub_dim = x.shape[1] // m
    trainer = kmeans_train if (k < LARGE_K_THRESHOLD or exact_large_k) else kmeans_train_two_stage
    books = np.empty((m, k, sub_dim), dtype=np.float32)
    for j in range(m):
        sub = trainer(x[:, j * sub_dim:(j + 1) * sub_dim], k, iters=iters, seed=seed + j)
        books[j] = sub.centroids
    return ProductQuantizer(books, bits)


def _pq_lloyd_step(pq: ProductQuantizer, z: np.ndarray) -> None:
    """One warm-started Lloyd pass per sub-space (in place)."""
    k = 1 << pq.bits
    for j in range(pq.m):
        sl = slice(j * pq.sub_dim, (j + 1) * pq.sub_dim)
        xj = np.ascontiguousarray(z[:, sl])
        labels, d2 = nearest_centroids(xj, pq.codebooks[j])
        new_c, counts = _update_centroids(xj, labels, k)
        keep = counts > 0
        pq.codebooks[j][keep] = new_c[keep]
        _reseed_empty(pq.codebooks[j], counts, xj, labels, d2)


def opq_train(data: np.ndarray, m: int, bits: int, outer_iters: int = 20,
              iters: int = 25, seed: int = 0,
              exact_large_k: bool = False) -> tuple[np.ndarray, ProductQuantizer]:
    """Jointly learn an orthonormal rotation and a product quantizer.

    Alternates: (a) update the rotation as the polar factor of the
    cross-covariance between data and current reconstructions, (b) one Lloyd
    pass of the quantizer on the newly rotated data. With outer_iters=0 this
    is plain pq_train under the identity rotation. The returned quantizer's
    objective_history records the rotated-space reconstruction MSE per outer
    iteration (non-increasing).
    """
    x = np.ascontiguousarray(data, dtype=np.float32)
    d = x.shape[1]
    rotation = np.eye(d, dtype=np.float32)
    pq = pq_train(x, m, bits, iters=iters, seed=seed, exact_large_k=exact_large_k)
    history = [pq.reconstruction_mse(x)]
    for _ in range(outer_iters):
        z = x @ rotation
        y = pq.decode_ids(pq.encode_ids(z))
        cross = x.astype(np.float64).T @ y.astype(np.float64)
        u, _, vt = np.linalg.svd(cross)
        rotation = (u @ vt).astype(np.float32)
        z = x @ rotation
        _pq_lloyd_step(pq, z)
        history.append(pq.reconstruction_mse(z))
    pq.objective_history = history
    return rotation, pq
