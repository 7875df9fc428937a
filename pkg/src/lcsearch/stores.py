"""Vector stores: the bridge between codecs and the search kernels.

A store owns what is needed to evaluate squared distances from an
uncompressed query to stored items: either raw float32 rows (exact store) or
packed codes plus per-query lookup tables (coded store). Coded stores keep
an unpacked sub-code id cache (uint16 per sub-quantizer) for the kernels,
and can materialize decoded reconstructions, which graph construction uses
for candidate-to-candidate distances.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .codec import Codec, IdentityCodec, PqCodec, TwoLevelCodec, decode_blocked
from .pq import unpack_codes


class VectorStore:
    """Exact float32 storage (codec 'none' or standalone exact graphs)."""

    def __init__(self, vectors: np.ndarray) -> None:
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        self.count, self.dim = self.vectors.shape

    def recon(self) -> np.ndarray:
        return self.vectors

    def query_ctx(self, q: np.ndarray):
        return _kernels.make_ctx(0, q, self.vectors, **_no_lookup())


def _no_lookup():
    d = _kernels.dummy_ctx_parts()
    d.pop("rows")
    return d


class CodedStore:
    """Packed codes plus unpacked id caches for kernel-side ADC."""

    def __init__(self, codec: Codec, codes: np.ndarray, materialize_recon: bool = False) -> None:
        self.codec = codec
        self.codes = np.ascontiguousarray(codes, dtype=np.uint8)
        self.count = self.codes.shape[0]
        self.dim = codec.dim
        self._recon: np.ndarray | None = None
        self._ids: np.ndarray | None = None
        self._mode = 0
        self._static: dict | None = None
        if isinstance(codec, TwoLevelCodec):
            self._mode = 2
            cids, fids = codec.split_ids(self.codes)
            self._ids = np.ascontiguousarray(
                np.concatenate([cids, fids], axis=1), dtype=np.uint16)
            coarse, fine = codec.coarse, codec.fine
            pos = np.arange(coarse.dim, dtype=np.int32)
            self._static = dict(
                m_coarse=coarse.m,
                ccents=coarse.codebooks.reshape(-1, coarse.sub_dim),
                kc=1 << coarse.bits,
                fcents=fine.codebooks.reshape(-1, fine.sub_dim),
                kf=1 << fine.bits,
                fine_sub_dim=fine.sub_dim,
                pos_block=pos // coarse.sub_dim,
                pos_col=pos % coarse.sub_dim,
            )
        elif isinstance(codec, PqCodec):
            self._mode = 1
            self._ids = np.ascontiguousarray(
                unpack_codes(self.codes, codec.pq.m, codec.pq.bits), dtype=np.uint16)
        else:
            # identity/scalar/PCA: kernels work on materialized decoded rows
            self._mode = 0
            materialize_recon = True
        if materialize_recon:
            self.recon()

    def recon(self) -> np.ndarray:
        if self._recon is None:
            self._recon = decode_blocked(self.codec, self.codes)
        return self._recon

    def query_ctx(self, q: np.ndarray):
        if self._mode == 0:
            return _kernels.make_ctx(0, q, self.recon(), **_no_lookup())
        table = self.codec.adc_table(q)
        parts = _kernels.dummy_ctx_parts()
        rows = parts.pop("rows")
        parts.pop("ids")
        parts.pop("tabs")
        parts.pop("offs")
        tabs = np.ascontiguousarray(
            np.concatenate([t.ravel() for t in table.tables]), dtype=np.float32)
        offs = [0]
        for t in table.tables:
            for _ in range(t.shape[0]):
                offs.append(offs[-1] + t.shape[1])
        offs = np.asarray(offs, dtype=np.int64)
        if self._mode == 2:
            parts.update(self._static)
        return _kernels.make_ctx(self._mode, table.query, rows, ids=self._ids,
                                 tabs=tabs, offs=offs, **parts)


def make_store(codec: Codec, codes: np.ndarray | None = None,
               vectors: np.ndarray | None = None, materialize_recon: bool = False):
    """Exact store for the identity codec when raw vectors are at hand."""
    if isinstance(codec, IdentityCodec) and vectors is not None:
        return VectorStore(vectors)
    return CodedStore(codec, codes, materialize_recon=materialize_recon)
