"""Inverted multi-index baseline for selectivity comparisons.

Two codebooks of K centroids quantize the two vector halves; every base
vector lands in cell c1*K + c2 and its residual is fine-coded. Queries rank
cells by d1[c1] + d2[c2] through the multi-sequence lattice merge and scan
list entries with ADC until the evaluation budget T is spent, mirroring the
budget semantics of the graph search.

`fine_spec` "none" stores entries exactly (used for selectivity comparisons
with exact distances). Serialization format "LCM1".
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .codec import Codec, train_codec, encode_blocked, codec_from_bytes
from .dataset import VectorSet
from .graph import SearchResult, VisitStats
from .kmeans import KMeansCodebook, kmeans_train, nearest_centroids
from .serial import Reader, Writer

MAGIC = b"LCM1"


class ImiError(ValueError):
    pass


class ImiIndex:
    def __init__(self, codebook1: KMeansCodebook, codebook2: KMeansCodebook,
                 fine_codec: Codec, cell_offsets: np.ndarray,
                 entry_ids: np.ndarray, entry_codes: np.ndarray) -> None:
        self.codebook1 = codebook1
        self.codebook2 = codebook2
        self.fine_codec = fine_codec
        self.cell_offsets = cell_offsets  # (K*K + 1,) int64, entries cell-sorted
        self.entry_ids = entry_ids  # (n,) int32 original ids
        self.entry_codes = entry_codes  # (n, fine code bytes) uint8
        self.K = codebook1.k
        self.dim = codebook1.dim + codebook2.dim

    @property
    def count(self) -> int:
        return self.entry_ids.shape[0]

    def cell_of(self, x: np.ndarray) -> np.ndarray:
        """Cell ids for vectors: nearest half-codebook centroids."""
        x = np.ascontiguousarray(x, dtype=np.float32)
        if x.ndim == 1:
            x = x[None, :]
        h = self.codebook1.dim
        c1, _ = nearest_centroids(x[:, :h], self.codebook1.centroids)
        c2, _ = nearest_centroids(x[:, h:], self.codebook2.centroids)
        return c1 * self.K + c2

    def residuals(self, x: np.ndarray, cells: np.ndarray) -> np.ndarray:
        h = self.codebook1.dim
        out = np.ascontiguousarray(x, dtype=np.float32).copy()
        out[:, :h] -= self.codebook1.centroids[cells // self.K]
        out[:, h:] -= self.codebook2.centroids[cells % self.K]
        return out

    def search(self, q: np.ndarray, T: int, k_results: int = 10) -> tuple[SearchResult, VisitStats]:
        """Budgeted ADC scan over cells in non-decreasing combined distance."""
        if self.count == 0:
            raise ImiError("empty index")
        q = np.ascontiguousarray(q, dtype=np.float32)
        h = self.codebook1.dim
        d1 = ((self.codebook1.centroids - q[None, :h]) ** 2).sum(axis=1).astype(np.float32)
        d2 = ((self.codebook2.centroids - q[None, h:]) ** 2).sum(axis=1).astype(np.float32)
        order1 = np.argsort(d1, kind="stable").astype(np.int64)
        order2 = np.argsort(d2, kind="stable").astype(np.int64)
        ctx = self._ctx_for(q, d1, d2)
        ids, dists, evals, cells = _kernels.imi_scan(
            order1, order2, d1[order1], d2[order2], self.cell_offsets,
            self.entry_ids, self.K, T, k_results, ctx)
        stats = VisitStats(base_distance_evals=int(evals),
                           upper_distance_evals=int(self.K * 2),
                           hops=int(cells))
        return SearchResult(ids.astype(np.int64), dists), stats

    def _ctx_for(self, q: np.ndarray, d1: np.ndarray, d2: np.ndarray):
        """Score entries exactly: when the fine codec is an unrotated product
        quantizer, the cell halves act as a 2-block coarse level and the scan
        is pure lookups plus the coarse/fine cross term; otherwise entries
        are scanned as materialized reconstructions."""
        from .codec import PqCodec
        fc = self.fine_codec
        if isinstance(fc, PqCodec) and fc.rotation is None and fc.pad_dim == fc.dim:
            if not hasattr(self, "_scan_ids"):
                cells = np.repeat(np.arange(self.K * self.K),
                                  np.diff(self.cell_offsets)).astype(np.int64)
                from .pq import unpack_codes
                fids = unpack_codes(self.entry_codes, fc.pq.m, fc.pq.bits)
                self._scan_ids = np.ascontiguousarray(np.concatenate(
                    [(cells // self.K)[:, None], (cells % self.K)[:, None], fids],
                    axis=1), dtype=np.uint16)
                pos = np.arange(self.dim, dtype=np.int32)
                h = self.codebook1.dim
                self._scan_static = dict(
                    m_coarse=2,
                    ccents=np.ascontiguousarray(np.concatenate(
                        [self.codebook1.centroids, self.codebook2.centroids])),
                    kc=self.K,
                    fcents=fc.pq.codebooks.reshape(-1, fc.pq.sub_dim),
                    kf=1 << fc.pq.bits,
                    fine_sub_dim=fc.pq.sub_dim,
                    pos_block=pos // h,
                    pos_col=pos % h,
                )
            zr = q.reshape(fc.pq.m, fc.pq.sub_dim)
            fcb = fc.pq.codebooks
            ftab = ((fcb ** 2).sum(axis=2)
                    - 2.0 * np.einsum("mkd,md->mk", fcb, zr)).astype(np.float32)
            tabs = np.ascontiguousarray(
                np.concatenate([d1, d2, ftab.ravel()]), dtype=np.float32)
            offs = np.concatenate([[0, self.K, 2 * self.K],
                                   2 * self.K + (1 + np.arange(fc.pq.m)) * (1 << fc.pq.bits)])
            parts = _kernels.dummy_ctx_parts()
            rows = parts.pop("rows")
            for key in ("ids", "tabs", "offs"):
                parts.pop(key)
            parts.update(self._scan_static)
            return _kernels.make_ctx(2, q, rows, ids=self._scan_ids, tabs=tabs,
                                     offs=offs.astype(np.int64), **parts)
        return self._full_store().query_ctx(q)

    def _full_store(self):
        if not hasattr(self, "_full_rows_store"):
            # reconstruct entries once: cell centroid + decoded fine residual
            rows = self.fine_codec.decode(self.entry_codes)
            cells = np.repeat(np.arange(self.K * self.K),
                              np.diff(self.cell_offsets)).astype(np.int64)
            h = self.codebook1.dim
            rows[:, :h] += self.codebook1.centroids[cells // self.K]
            rows[:, h:] += self.codebook2.centroids[cells % self.K]
            from .stores import VectorStore
            self._full_rows_store = VectorStore(rows)
        return self._full_rows_store

    def to_bytes(self) -> bytes:
        w = Writer()
        w.magic(MAGIC)
        w.u32(self.K)
        w.u32(self.dim)
        w.array(self.codebook1.centroids, np.float32)
        w.array(self.codebook2.centroids, np.float32)
        w.block(self.fine_codec.to_bytes())
        w.u32(self.count)
        w.u32(self.entry_codes.shape[1])
        w.array(self.cell_offsets, np.int64)
        w.array(self.entry_ids, np.int32)
        w.array(self.entry_codes, np.uint8)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ImiIndex":
        r = Reader(raw)
        r.magic(MAGIC)
        K = r.u32()
        dim = r.u32()
        h = dim // 2
        cb1 = KMeansCodebook(r.array((K, h), np.float32))
        cb2 = KMeansCodebook(r.array((K, dim - h), np.float32))
        fine = codec_from_bytes(r.block())
        n = r.u32()
        fb = r.u32()
        offsets = r.array((K * K + 1,), np.int64)
        ids = r.array((n,), np.int32)
        codes = r.array((n, fb), np.uint8)
        return cls(cb1, cb2, fine, offsets, ids, codes)


def imi_build(learn: VectorSet, base: VectorSet, K: int = 1024,
              fine_spec: str = "OPQ32x8", seed: int = 0,
              kmeans_iters: int = 25, opq_iters: int = 20,
              max_cells: int = 1 << 24) -> ImiIndex:
    """Train half-space codebooks on the learn set and fill the inverted lists.

    K*K cells are materialized as offsets; the guard refuses configurations
    whose cell table alone would dwarf the data.
    """
    if base.dim % 2:
        raise ImiError("dimension must be even to split into halves")
    if K * K > max_cells:
        raise ImiError(f"K^2 = {K * K} cells exceed the guard ({max_cells}); "
                       "lower K or raise max_cells")
    if learn.dim != base.dim:
        raise ImiError("learn/base dimension mismatch")
    h = base.dim // 2
    cb1 = kmeans_train(learn.data[:, :h], K, iters=kmeans_iters, seed=seed)
    cb2 = kmeans_train(learn.data[:, h:], K, iters=kmeans_iters, seed=seed + 1)
    c1, _ = nearest_centroids(base.data[:, :h], cb1.centroids)
    c2, _ = nearest_centroids(base.data[:, h:], cb2.centroids)
    cells = c1 * K + c2
    order = np.argsort(cells, kind="stable")  # ties keep ascending id
    entry_ids = order.astype(np.int32)
    sorted_cells = cells[order]
    offsets = np.zeros(K * K + 1, dtype=np.int64)
    np.cumsum(np.bincount(sorted_cells, minlength=K * K), out=offsets[1:])
    resid = base.data[order].copy()
    resid[:, :h] -= cb1.centroids[c1[order]]
    resid[:, h:] -= cb2.centroids[c2[order]]
    learn_cells1, _ = nearest_centroids(learn.data[:, :h], cb1.centroids)
    learn_cells2, _ = nearest_centroids(learn.data[:, h:], cb2.centroids)
    learn_resid = learn.data.copy()
    learn_resid[:, :h] -= cb1.centroids[learn_cells1]
    learn_resid[:, h:] -= cb2.centroids[learn_cells2]
    fine = train_codec(fine_spec, learn_resid, seed=seed + 2,
                       opq_iters=opq_iters, kmeans_iters=kmeans_iters)
    codes = encode_blocked(fine, resid)
    return ImiIndex(cb1, cb2, fine, offsets, entry_ids, codes)


def save_imi(index: ImiIndex, path) -> None:
    with open(path, "wb") as f:
        f.write(index.to_bytes())


def load_imi(path) -> ImiIndex:
    with open(path, "rb") as f:
        return ImiIndex.from_bytes(f.read())
