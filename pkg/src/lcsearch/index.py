"""The composite index: codec + layered graph + per-vector codes + optional
regression refinement, with two-stage search.

Stage 1 generates candidates by graph search over ADC distances under the
evaluation budget T. Stage 2 re-ranks the top `refine_shortlist` candidates
by exact distance to their refined reconstructions (the M-byte regression
codebook when M > 0, else the shared 0-byte weights), recomputed on the fly
from codes; original vectors are discarded after build. Candidates beyond
the shortlist keep their stage-1 ADC distances and rank after the refined
ones.

Memory per vector is code_bytes + 4*k_base + M: the serialized base level
stores exactly k_base 4-byte link slots per vector.

Index file format "LCI1": length-prefixed sections (config JSON, codec,
graph, codes, beta codes, shared weights, regression codebook).
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import refine
from .codec import Codec, codec_from_bytes, encode_blocked, train_codec, parse_codec_spec
from .dataset import VectorSet
from .graph import (GraphBuilder, GraphSearcher, LayeredGraph, SearchParams,
                    SearchResult, VisitStats, GraphError)
from .refine import RegressionCodebook, SharedBeta
from .serial import Reader, Writer
from .stores import CodedStore

MAGIC = b"LCI1"


class ConfigError(ValueError):
    pass


@dataclass
class LCConfig:
    """Build-time knobs; `links` is the base-level out-degree bound."""

    links: int
    codec_spec: str
    M: int = 0
    B: int = 256
    refine_shortlist: int = 10
    k_upper: int = 32
    ef_construction: int = 200
    level_ratio: float = 30.0
    seed: int = 0
    train_sample: int = 250_000
    em_iters: int = 10
    opq_iters: int = 20
    kmeans_iters: int = 25
    coarse_exact: bool = False

    def __post_init__(self) -> None:
        if self.links < 2:
            raise ConfigError("links < 2 cannot form a navigable graph")
        if self.M < 0 or self.B < 1 or self.B > 256:
            raise ConfigError("need M >= 0 and 1 <= B <= 256")
        parse_codec_spec(self.codec_spec)  # validates


_LC_RE = re.compile(r"^L(\d+)&([A-Za-z0-9x+]+)$")


def parse_lc_config(text: str, **overrides) -> LCConfig:
    """Parse 'L6&OPQ32,M=8' style config strings.

    The code part is either a byte count in the compact naming (OPQ32 means
    a 32-byte rotated product quantizer, i.e. OPQ32x8) or a full codec spec
    such as PQ1x16+OPQ30x8.
    """
    parts = text.strip().split(",")
    m = _LC_RE.match(parts[0])
    if not m:
        raise ConfigError(f"bad index config {text!r}")
    links = int(m.group(1))
    code = m.group(2)
    if "x" not in code:
        fam = "OPQ" if code.upper().startswith("OPQ") else "PQ"
        nbytes = int(code[len(fam):])
        code = f"{fam}{nbytes}x8"
    opts: dict = {}
    for p in parts[1:]:
        k, _, v = p.partition("=")
        k = k.strip()
        if k == "M":
            opts["M"] = int(v)
        elif k == "B":
            opts["B"] = int(v)
        else:
            raise ConfigError(f"unknown config option {k!r}")
    opts.update(overrides)
    return LCConfig(links=links, codec_spec=code, **opts)


class LCIndex:
    def __init__(self, codec: Codec, graph: LayeredGraph, codes: np.ndarray,
                 shared_beta: SharedBeta, config: LCConfig,
                 book: RegressionCodebook | None = None,
                 beta_codes: np.ndarray | None = None) -> None:
        self.codec = codec
        self.graph = graph
        self.codes = np.ascontiguousarray(codes, dtype=np.uint8)
        self.shared_beta = shared_beta
        self.config = config
        self.book = book
        self.beta_codes = beta_codes
        if self.codes.shape[0] != graph.count:
            raise ConfigError("code count does not match graph size")
        if config.M > 0 and (beta_codes is None or beta_codes.shape != (graph.count, config.M)):
            raise ConfigError("M > 0 requires beta codes for every vector")
        self._store = CodedStore(codec, self.codes)
        self._searcher = GraphSearcher(graph, self._store)

    @property
    def count(self) -> int:
        return self.graph.count

    def notation(self) -> str:
        """Compact naming: links, code bytes, refinement bytes."""
        fam = "OPQ" if "OPQ" in self.config.codec_spec or \
            self.codec.spec.startswith("OPQ") else "PQ"
        return f"L{self.config.links}&{fam}{self.codec.code_bytes} M={self.config.M}"

    def stats(self) -> dict:
        cb = self.codec.code_bytes
        return {
            "count": self.count,
            "code_bytes": cb,
            "links": self.config.links,
            "M": self.config.M,
            "bytes_per_vector": cb + 4 * self.config.links + self.config.M,
            "notation": self.notation(),
        }

    def search(self, q: np.ndarray, T: int, k_results: int = 10,
               ef: int | None = None,
               refine_shortlist: int | None = None) -> tuple[SearchResult, VisitStats]:
        """Two-stage search; T caps base-level ADC evaluations."""
        if self.count == 0:
            raise GraphError("empty index")
        shortlist = self.config.refine_shortlist if refine_shortlist is None else refine_shortlist
        shortlist = min(shortlist, T)
        ef = T if ef is None else ef
        want = max(k_results, shortlist)
        params = SearchParams(T=T, ef=max(ef, want), k_results=want)
        res, stats = self._searcher.search(q, params)
        ns = min(shortlist, len(res.ids))
        if ns == 0:
            k = min(k_results, len(res.ids))
            return SearchResult(res.ids[:k], res.dists[:k]), stats
        short_ids = res.ids[:ns].astype(np.int64)
        refined = self._refined_reconstruction(short_ids)
        q32 = np.asarray(q, dtype=np.float32)
        rd = ((refined - q32[None, :]) ** 2).sum(axis=1)
        order = np.argsort(rd, kind="stable")  # ties resolve by stage-1 order
        ids = np.concatenate([short_ids[order], res.ids[ns:]])
        dists = np.concatenate([rd[order], res.dists[ns:]]).astype(np.float32)
        k = min(k_results, ids.size)
        return SearchResult(ids[:k], dists[:k]), stats

    def _refined_reconstruction(self, ids: np.ndarray) -> np.ndarray:
        """Refined vectors for a shortlist, decoded on demand (never stored)."""
        base = self.graph.levels[0]
        k = self.graph.k_base
        nbr = np.empty((ids.size, k + 1), dtype=np.int64)
        nbr[:, 0] = ids
        for j, i in enumerate(ids):
            loc = base.local_of[i]
            cnt = min(int(base.counts[loc]), k)
            nbr[j, 1:cnt + 1] = base.node_ids[base.adj[loc, :cnt]]
            nbr[j, cnt + 1:] = i
        uniq, inv = np.unique(nbr, return_inverse=True)
        rows = self.codec.decode(self.codes[uniq])
        local = inv.reshape(nbr.shape)
        # order neighbor rows by decoded distance to the owner, ties by id
        own = rows[local[:, 0]][:, None, :]
        d = ((rows[local[:, 1:]] - own) ** 2).sum(axis=2)
        ids_mat = uniq[local[:, 1:]]
        id_order = np.argsort(ids_mat, axis=1, kind="stable")
        d = np.take_along_axis(d, id_order, axis=1)
        pre = np.take_along_axis(local[:, 1:], id_order, axis=1)
        order = np.argsort(d, axis=1, kind="stable")
        g_local = np.concatenate(
            [local[:, :1], np.take_along_axis(pre, order, axis=1)], axis=1)
        if self.config.M > 0:
            return refine.refine_reconstruct(
                g_local, rows, self.book, self.beta_codes[ids])
        return refine.refine_reconstruct(
            g_local, rows, None, None, shared=self.shared_beta)

    def to_bytes(self) -> bytes:
        w = Writer()
        w.magic(MAGIC)
        w.text(json.dumps(asdict(self.config), sort_keys=True))
        w.block(self.codec.to_bytes())
        w.block(self.graph.to_bytes())
        w.u32(self.codes.shape[0])
        w.u32(self.codes.shape[1])
        w.array(self.codes, np.uint8)
        w.u32(self.config.M)
        if self.config.M > 0:
            w.array(self.beta_codes, np.uint8)
        w.u32(self.shared_beta.weights.size)
        w.array(self.shared_beta.weights, np.float64)
        w.block(self.book.to_bytes() if self.book is not None else b"")
        return w.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "LCIndex":
        r = Reader(raw)
        r.magic(MAGIC)
        config = LCConfig(**json.loads(r.text()))
        codec = codec_from_bytes(r.block())
        graph = LayeredGraph.from_bytes(r.block())
        n = r.u32()
        cb = r.u32()
        codes = r.array((n, cb), np.uint8)
        m = r.u32()
        beta_codes = r.array((n, m), np.uint8) if m > 0 else None
        nw = r.u32()
        weights = r.array((nw,), np.float64)
        book_blob = r.block()
        book = RegressionCodebook.from_bytes(book_blob) if book_blob else None
        return cls(codec, graph, codes, SharedBeta(weights), config, book, beta_codes)


def build(learn: VectorSet, base: VectorSet, config: LCConfig,
          verbose: bool = False) -> LCIndex:
    """Train the codec on the learn set, encode and graph-link the base set,
    then fit the refinement (shared weights, plus the regression codebook
    and per-vector codes when M > 0). Deterministic for a fixed seed.

    The learn set must be disjoint from the base set; this is the caller's
    responsibility.
    """
    if learn.dim != base.dim:
        raise ConfigError("learn/base dimension mismatch")
    t0 = time.time()

    def log(msg):
        if verbose:
            print(f"[build +{time.time() - t0:7.1f}s] {msg}", flush=True)

    codec = train_codec(config.codec_spec, learn.data, seed=config.seed,
                        opq_iters=config.opq_iters, kmeans_iters=config.kmeans_iters,
                        coarse_exact=config.coarse_exact)
    log(f"codec {codec.spec} trained ({codec.code_bytes} bytes)")
    if config.M > 0 and base.dim % config.M:
        raise ConfigError(f"dim {base.dim} not divisible by M={config.M}")
    codes = encode_blocked(codec, base.data)
    log("base encoded")
    store = CodedStore(codec, codes, materialize_recon=True)
    builder = GraphBuilder(store, base.data, k_base=config.links,
                           k_upper=config.k_upper,
                           ef_construction=config.ef_construction,
                           level_ratio=config.level_ratio, seed=config.seed)
    graph = builder.build()
    log("graph built")
    recon = store.recon()
    rng = np.random.default_rng(config.seed + 13)
    n = base.count
    sample = np.sort(rng.choice(n, size=min(config.train_sample, n), replace=False))
    g_ids = refine.design_ids(graph, sample, recon)
    shared = refine.compute_shared_beta(base.data[sample], g_ids, recon)
    log("shared weights solved")
    book = None
    beta_codes = None
    if config.M > 0:
        book = refine.train_regression_codebook(
            base.data[sample], g_ids, recon, M=config.M, B=config.B,
            iters=config.em_iters, seed=config.seed + 17)
        log("regression codebook trained")
        all_ids = refine.design_ids(graph, np.arange(n), recon)
        beta_codes = refine.assign_beta_codes(base.data, all_ids, recon, book)
        log("beta codes assigned")
    return LCIndex(codec, graph, codes, shared, config, book, beta_codes)


def save_index(index: LCIndex, path) -> None:
    with open(path, "wb") as f:
        f.write(index.to_bytes())


def load_index(path) -> LCIndex:
    with open(path, "rb") as f:
        return LCIndex.from_bytes(f.read())
