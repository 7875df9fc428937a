"""HNSW-style layered proximity graph over coded vectors.

Layer membership follows a geometric law: a node reaches level l with
probability ratio^-l (ratio 30 by default, so consecutive levels shrink by
about 30x). The base level holds every node with up to k_base out-links;
upper levels are capped at k_upper=32. Construction assigns levels up front
and inserts nodes in descending level order, realizing a layer-by-layer
build; the query side of every insertion uses the uncompressed vector while
stored items are scored through their codes (asymmetric distances).

Search descends greedily through the upper levels and runs a best-first beam
on the base level, hard-capped at T base-level distance evaluations. T only
counts base-level evaluations; upper-level work is reported separately.

Serialization format "LCG1": per-level CSR adjacency over global ids,
little-endian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .serial import Reader, Writer

MAGIC = b"LCG1"
DEFAULT_LEVEL_RATIO = 30.0


class GraphError(ValueError):
    pass


@dataclass
class SearchParams:
    """T caps base-level distance evaluations; ef is the beam width."""

    T: int
    ef: int
    k_results: int = 10

    def __post_init__(self) -> None:
        if self.T < self.k_results:
            raise GraphError(f"T={self.T} must be >= k_results={self.k_results}")
        if self.ef < self.k_results:
            raise GraphError(f"ef={self.ef} must be >= k_results={self.k_results}")


@dataclass
class VisitStats:
    base_distance_evals: int = 0
    upper_distance_evals: int = 0
    hops: int = 0


@dataclass
class SearchResult:
    ids: np.ndarray  # (k,) int64, ascending distance
    dists: np.ndarray  # (k,) float32

    def __len__(self) -> int:
        return len(self.ids)


def assign_level(seed: int, node_id: int, ratio: float = DEFAULT_LEVEL_RATIO) -> int:
    """Geometric level for (seed, node_id): floor(-ln(u)/ln(ratio)), u in (0,1]."""
    u = 1.0 - np.random.default_rng([seed, node_id]).random()
    return int(-math.log(u) / math.log(ratio))


def assign_levels(seed: int, count: int, ratio: float = DEFAULT_LEVEL_RATIO) -> np.ndarray:
    return np.array([assign_level(seed, i, ratio) for i in range(count)], dtype=np.int32)


def shrink_neighbors(candidates, bound: int, reconstructor) -> list[int]:
    """Diversity heuristic over (id, dist) candidates sorted by distance.

    Keeps a candidate c only if dist(c, base) < dist(c, s) for every
    already-kept s, where pair distances come from `reconstructor(id)`
    vectors; stops once `bound` are kept. The first candidate is always kept.
    """
    kept: list[int] = []
    vecs: dict[int, np.ndarray] = {}

    def vec(i):
        if i not in vecs:
            vecs[i] = np.asarray(reconstructor(i), dtype=np.float32)
        return vecs[i]

    for cid, cdist in candidates:
        if len(kept) >= bound:
            break
        ok = True
        for s in kept:
            pair = float(((vec(cid) - vec(s)) ** 2).sum())
            if pair <= cdist:
                ok = False
                break
        if ok:
            kept.append(cid)
    return kept


@dataclass
class GraphLevel:
    node_ids: np.ndarray  # (n_l,) int32 global ids, ascending
    local_of: np.ndarray  # (n,) int32, -1 when absent
    adj: np.ndarray  # (n_l, bound) int32 local slots
    counts: np.ndarray  # (n_l,) int32

    @property
    def size(self) -> int:
        return self.node_ids.shape[0]


class LayeredGraph:
    """Adjacency structure only; codes live in a store alongside it."""

    def __init__(self, count: int, k_base: int, k_upper: int = 32,
                 level_ratio: float = DEFAULT_LEVEL_RATIO, seed: int = 0,
                 level_of: np.ndarray | None = None) -> None:
        if k_base < 2:
            raise GraphError("k_base < 2 cannot form a navigable graph")
        self.count = count
        self.k_base = k_base
        self.k_upper = k_upper
        self.level_ratio = float(level_ratio)
        self.seed = seed
        self.level_of = (assign_levels(seed, count, level_ratio)
                         if level_of is None else level_of.astype(np.int32))
        self.entry_point = -1
        self.levels: list[GraphLevel] = []
        self._alloc_levels()

    def _alloc_levels(self) -> None:
        top = int(self.level_of.max(initial=0))
        for lvl in range(top + 1):
            members = np.flatnonzero(self.level_of >= lvl).astype(np.int32)
            bound = self.k_base if lvl == 0 else self.k_upper
            local_of = np.full(self.count, -1, dtype=np.int32)
            local_of[members] = np.arange(members.size, dtype=np.int32)
            self.levels.append(GraphLevel(
                node_ids=members,
                local_of=local_of,
                adj=np.full((members.size, bound), -1, dtype=np.int32),
                counts=np.zeros(members.size, dtype=np.int32),
            ))

    @property
    def top_level(self) -> int:
        return len(self.levels) - 1

    def bound(self, lvl: int) -> int:
        return self.k_base if lvl == 0 else self.k_upper

    def neighbors(self, lvl: int, node_id: int) -> np.ndarray:
        """Global ids of a node's out-links at a level."""
        level = self.levels[lvl]
        loc = level.local_of[node_id]
        if loc < 0:
            raise GraphError(f"node {node_id} absent from level {lvl}")
        return level.node_ids[level.adj[loc, :level.counts[loc]]]

    def to_bytes(self) -> bytes:
        w = Writer()
        w.magic(MAGIC)
        w.u32(self.count)
        w.u32(self.k_base)
        w.u32(self.k_upper)
        w.f64(self.level_ratio)
        w.u64(self.seed & 0xFFFFFFFFFFFFFFFF)
        w.u32(self.entry_point if self.entry_point >= 0 else 0xFFFFFFFF)
        w.array(self.level_of.astype(np.int8), np.int8)
        w.u32(len(self.levels))
        for lvl, level in enumerate(self.levels):
            w.u32(level.size)
            mask = np.arange(level.adj.shape[1])[None, :] < level.counts[:, None]
            if lvl == 0:
                # fixed-width rows: exactly 4*k_base bytes per vector
                full = np.full_like(level.adj, -1)
                full[mask] = level.node_ids[level.adj[mask]]
                w.array(full, np.int32)
            else:
                w.array(level.node_ids, np.int32)
                offsets = np.zeros(level.size + 1, dtype=np.int64)
                np.cumsum(level.counts, out=offsets[1:])
                w.array(offsets, np.int64)
                w.array(level.node_ids[level.adj[mask]], np.int32)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "LayeredGraph":
        r = Reader(raw)
        r.magic(MAGIC)
        count = r.u32()
        k_base = r.u32()
        k_upper = r.u32()
        ratio = r.f64()
        seed = r.u64()
        entry = r.u32()
        level_of = r.array((count,), np.int8).astype(np.int32)
        g = cls(count, k_base, k_upper, ratio, seed=0, level_of=level_of)
        g.seed = seed
        g.entry_point = -1 if entry == 0xFFFFFFFF else int(entry)
        nlv = r.u32()
        if nlv != len(g.levels):
            raise GraphError(f"level count mismatch: {nlv} vs {len(g.levels)}")
        for lvl in range(nlv):
            size = r.u32()
            level = g.levels[lvl]
            if size != level.size:
                raise GraphError(f"level {lvl} size mismatch")
            if lvl == 0:
                full = r.array((size, k_base), np.int32)
                level.counts[:] = (full >= 0).sum(axis=1).astype(np.int32)
                mask = np.arange(k_base)[None, :] < level.counts[:, None]
                level.adj[mask] = level.local_of[full[mask]]
            else:
                ids = r.array((size,), np.int32)
                if not np.array_equal(ids, level.node_ids):
                    raise GraphError(f"level {lvl} membership mismatch")
                offsets = r.array((size + 1,), np.int64)
                flat = r.array((int(offsets[-1]),), np.int32)
                level.counts[:] = np.diff(offsets).astype(np.int32)
                mask = np.arange(level.adj.shape[1])[None, :] < level.counts[:, None]
                level.adj[mask] = level.local_of[flat]
        return g


class _Stamps:
    """Reusable visited buffers, one per level."""

    def __init__(self, sizes: list[int]) -> None:
        self.bufs = [np.zeros(s, dtype=np.int32) for s in sizes]
        self.stamp = 0

    def next(self) -> int:
        self.stamp += 1
        if self.stamp >= 2**31 - 1:
            for b in self.bufs:
                b[:] = 0
            self.stamp = 1
        return self.stamp


class GraphSearcher:
    """Read-only search over a built graph and its store.

    Kernels hold the GIL, so one searcher is safe under threaded callers;
    use separate processes to scale query throughput.
    """

    def __init__(self, graph: LayeredGraph, store) -> None:
        self.graph = graph
        self.store = store
        self._stamps = _Stamps([lv.size for lv in graph.levels])

    def search(self, q: np.ndarray, params: SearchParams) -> tuple[SearchResult, VisitStats]:
        g = self.graph
        if g.entry_point < 0:
            raise GraphError("empty graph")
        ctx = self.store.query_ctx(q)
        stats = VisitStats()
        cur = g.entry_point
        cur_d = -1.0
        for lvl in range(g.top_level, 0, -1):
            level = g.levels[lvl]
            loc = level.local_of[cur]
            if loc < 0:
                continue
            if cur_d < 0.0:
                cur_d = float(_kernels.eval_one(ctx, cur))
                stats.upper_distance_evals += 1
            stamp = self._stamps.next()
            loc, cur_d, ev, hp = _kernels.greedy_descent(
                level.adj, level.counts, level.node_ids, loc, np.float32(cur_d),
                self._stamps.bufs[lvl], stamp, ctx)
            stats.upper_distance_evals += int(ev)
            stats.hops += int(hp)
            cur = int(level.node_ids[loc])
        base = g.levels[0]
        stamp = self._stamps.next()
        out_i, out_d, ev, hp = _kernels.beam_search(
            base.adj, base.counts, base.node_ids, base.local_of[cur],
            np.float32(cur_d), params.ef, params.T,
            self._stamps.bufs[0], stamp, ctx)
        stats.base_distance_evals = int(ev)
        stats.hops += int(hp)
        k = min(params.k_results, out_i.size)
        return (SearchResult(base.node_ids[out_i[:k]].astype(np.int64), out_d[:k]),
                stats)


class GraphBuilder:
    """Single-writer batched construction.

    Levels are assigned up front; `build()` inserts in descending level
    order (ties by ascending id). Concurrent searches during build are
    unsupported.
    """

    def __init__(self, store, vectors: np.ndarray, k_base: int, k_upper: int = 32,
                 ef_construction: int = 200,
                 level_ratio: float = DEFAULT_LEVEL_RATIO, seed: int = 0) -> None:
        self.store = store
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if self.vectors.shape[0] != store.count:
            raise GraphError("vector count does not match the store")
        self.graph = LayeredGraph(store.count, k_base, k_upper, level_ratio, seed)
        self.ef_construction = ef_construction
        self._stamps = _Stamps([lv.size for lv in self.graph.levels])
        self._inserted = np.zeros(store.count, dtype=bool)
        self._recon = store.recon()

    def insert(self, node_id: int) -> None:
        """Link one node at every level up to its assigned level.

        The inserted vector is used uncompressed on the query side; stored
        nodes are scored through their codes.
        """
        g = self.graph
        if self._inserted[node_id]:
            raise GraphError(f"duplicate insert of id {node_id}")
        self._inserted[node_id] = True
        node_level = int(g.level_of[node_id])
        if g.entry_point < 0:
            g.entry_point = node_id
            return
        ctx = self.store.query_ctx(self.vectors[node_id])
        cur = g.entry_point
        cur_d = -1.0
        top = int(g.level_of[g.entry_point])
        for lvl in range(top, node_level, -1):
            level = g.levels[lvl]
            loc = level.local_of[cur]
            if loc < 0:
                continue
            if cur_d < 0.0:
                cur_d = float(_kernels.eval_one(ctx, cur))
            stamp = self._stamps.next()
            loc, cur_d, _, _ = _kernels.greedy_descent(
                level.adj, level.counts, level.node_ids, loc, np.float32(cur_d),
                self._stamps.bufs[lvl], stamp, ctx)
            cur = int(level.node_ids[loc])
        for lvl in range(min(node_level, top), -1, -1):
            level = g.levels[lvl]
            seed_loc = level.local_of[cur]
            stamp = self._stamps.next()
            cand_i, cand_d, _, _ = _kernels.beam_search(
                level.adj, level.counts, level.node_ids, seed_loc,
                np.float32(cur_d), self.ef_construction, 2**31 - 1,
                self._stamps.bufs[lvl], stamp, ctx)
            links = _kernels.shrink_select(cand_i, cand_d, level.node_ids,
                                           self._recon, g.bound(lvl))
            _kernels.add_links_with_backlinks(
                level.adj, level.counts, level.node_ids, self._recon,
                level.local_of[node_id], links, g.bound(lvl))
            cur = int(level.node_ids[cand_i[0]])
            cur_d = float(cand_d[0])
        if node_level > top or (node_level == top and node_id < g.entry_point):
            g.entry_point = node_id

    def build(self, order: np.ndarray | None = None) -> LayeredGraph:
        g = self.graph
        if order is None:
            order = np.lexsort((np.arange(g.count), -g.level_of))
        for node_id in order:
            self.insert(int(node_id))
        # entry point: highest level, ties to lowest id
        top_ids = g.levels[-1].node_ids
        g.entry_point = int(top_ids.min()) if top_ids.size else -1
        return g
