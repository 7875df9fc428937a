"""Numba kernels for graph construction, graph search and inverted-list scans.

All kernels work on plain arrays. Distances are evaluated through a context
tuple `ctx` built by the vector stores:

    (mode, q, rows, ids, tabs, offs, m_coarse, ccents, kc, fcents, kf,
     fine_sub_dim, pos_block, pos_col)

mode 0: exact float32 rows (`rows[i]` vs `q`).
mode 1: pure table lookups; sub-code j of vector i contributes
        tabs[offs[j] + ids[i, j]].
mode 2: two-level lookups plus the exact coarse/fine cross term, computed by
        gathering centroid rows (pos_block/pos_col map a padded component to
        its coarse sub-quantizer block and column).

Kernels hold the GIL (no `nogil`), so shared visited-stamp buffers are safe
under concurrent Python callers; scale across cores with processes.
"""

from __future__ import annotations

import numpy as np
from numba import njit


def make_ctx(mode: int, q: np.ndarray, rows: np.ndarray, ids: np.ndarray,
             tabs: np.ndarray, offs: np.ndarray, m_coarse: int,
             ccents: np.ndarray, kc: int, fcents: np.ndarray, kf: int,
             fine_sub_dim: int, pos_block: np.ndarray, pos_col: np.ndarray):
    return (np.int64(mode),
            np.ascontiguousarray(q, dtype=np.float32),
            rows, ids, tabs, offs, np.int64(m_coarse),
            ccents, np.int64(kc), fcents, np.int64(kf), np.int64(fine_sub_dim),
            pos_block, pos_col)


_EMPTY_F2 = np.empty((1, 1), dtype=np.float32)
_EMPTY_U2 = np.empty((1, 1), dtype=np.uint16)
_EMPTY_F1 = np.empty(1, dtype=np.float32)
_EMPTY_I8 = np.zeros(2, dtype=np.int64)
_EMPTY_I4 = np.zeros(1, dtype=np.int32)


def dummy_ctx_parts():
    """Placeholder arrays for unused ctx slots (keeps one kernel specialization)."""
    return dict(rows=_EMPTY_F2, ids=_EMPTY_U2, tabs=_EMPTY_F1, offs=_EMPTY_I8,
                m_coarse=0, ccents=_EMPTY_F2, kc=1, fcents=_EMPTY_F2, kf=1,
                fine_sub_dim=1, pos_block=_EMPTY_I4, pos_col=_EMPTY_I4)


@njit(inline="always", cache=True)
def _dist(ctx, node):
    mode = ctx[0]
    if mode == 0:
        q = ctx[1]
        rows = ctx[2]
        acc = 0.0
        for t in range(q.shape[0]):
            diff = q[t] - rows[node, t]
            acc += diff * diff
        return np.float32(acc)
    ids = ctx[3]
    tabs = ctx[4]
    offs = ctx[5]
    acc = 0.0
    for j in range(ids.shape[1]):
        acc += tabs[offs[j] + ids[node, j]]
    if mode == 2:
        m_c = ctx[6]
        ccents = ctx[7]
        kc = ctx[8]
        fcents = ctx[9]
        kf = ctx[10]
        fsub = ctx[11]
        pos_block = ctx[12]
        pos_col = ctx[13]
        cross = 0.0
        m_f = ids.shape[1] - m_c
        for j in range(m_f):
            frow = j * kf + ids[node, m_c + j]
            base_p = j * fsub
            for t in range(fsub):
                p = base_p + t
                ic = pos_block[p]
                cross += ccents[ic * kc + ids[node, ic], pos_col[p]] * fcents[frow, t]
        acc += 2.0 * cross
    return np.float32(acc)


@njit(inline="always", cache=True)
def _heap_push_min(hd, hi, n, d, v):
    hd[n] = d
    hi[n] = v
    c = n
    while c > 0:
        p = (c - 1) >> 1
        if hd[p] <= hd[c]:
            break
        hd[p], hd[c] = hd[c], hd[p]
        hi[p], hi[c] = hi[c], hi[p]
        c = p
    return n + 1


@njit(inline="always", cache=True)
def _heap_pop_min(hd, hi, n):
    d = hd[0]
    v = hi[0]
    n -= 1
    hd[0] = hd[n]
    hi[0] = hi[n]
    c = 0
    while True:
        l = 2 * c + 1
        if l >= n:
            break
        r = l + 1
        s = l
        if r < n and hd[r] < hd[l]:
            s = r
        if hd[c] <= hd[s]:
            break
        hd[c], hd[s] = hd[s], hd[c]
        hi[c], hi[s] = hi[s], hi[c]
        c = s
    return d, v, n


@njit(inline="always", cache=True)
def _heap_push_max(hd, hi, n, d, v):
    hd[n] = d
    hi[n] = v
    c = n
    while c > 0:
        p = (c - 1) >> 1
        if hd[p] >= hd[c]:
            break
        hd[p], hd[c] = hd[c], hd[p]
        hi[p], hi[c] = hi[c], hi[p]
        c = p
    return n + 1


@njit(inline="always", cache=True)
def _heap_replace_max(hd, hi, n, d, v):
    hd[0] = d
    hi[0] = v
    c = 0
    while True:
        l = 2 * c + 1
        if l >= n:
            break
        r = l + 1
        s = l
        if r < n and hd[r] > hd[l]:
            s = r
        if hd[c] >= hd[s]:
            break
        hd[c], hd[s] = hd[s], hd[c]
        hi[c], hi[s] = hi[s], hi[c]
        c = s
    return n


@njit(cache=True)
def eval_one(ctx, row):
    """Distance from the context's query to one stored item."""
    return _dist(ctx, row)


@njit(cache=True)
def greedy_descent(adj, counts, node_ids, start_local, start_dist, visited, stamp, ctx):
    """Move to the best neighbor while it improves; returns (local, dist, evals, hops)."""
    cur = start_local
    cur_d = start_dist
    visited[cur] = stamp
    evals = 0
    hops = 0
    improved = True
    while improved:
        improved = False
        best = cur
        best_d = cur_d
        for idx in range(counts[cur]):
            u = adj[cur, idx]
            if visited[u] == stamp:
                continue
            visited[u] = stamp
            d = _dist(ctx, node_ids[u])
            evals += 1
            if d < best_d:
                best_d = d
                best = u
        if best != cur:
            cur = best
            cur_d = best_d
            improved = True
            hops += 1
    return cur, cur_d, evals, hops


@njit(cache=True)
def beam_search(adj, counts, node_ids, seed_local, seed_dist, ef, budget,
                visited, stamp, ctx):
    """Best-first beam search on one level with a hard cap on distance evaluations.

    seed_dist < 0 means the seed has not been evaluated yet (its evaluation
    counts against the budget). Stops when the best unexpanded candidate is
    worse than the ef-th best result, or when `budget` evaluations are spent.
    Returns (ids_sorted, dists_sorted, evals, hops) with results ascending by
    (distance, global id).
    """
    cap = min(budget, adj.shape[0]) + 2  # each node is pushed at most once
    cand_d = np.empty(cap, dtype=np.float32)
    cand_i = np.empty(cap, dtype=np.int32)
    res_d = np.empty(ef, dtype=np.float32)
    res_i = np.empty(ef, dtype=np.int32)
    n_cand = 0
    n_res = 0
    evals = 0
    hops = 0

    visited[seed_local] = stamp
    if seed_dist < 0.0:
        if budget <= 0:
            return (np.empty(0, dtype=np.int32), np.empty(0, dtype=np.float32), 0, 0)
        seed_dist = _dist(ctx, node_ids[seed_local])
        evals += 1
    n_res = _heap_push_max(res_d, res_i, n_res, seed_dist, seed_local)
    n_cand = _heap_push_min(cand_d, cand_i, n_cand, seed_dist, seed_local)

    exhausted = evals >= budget
    while n_cand > 0 and not exhausted:
        d, v, n_cand = _heap_pop_min(cand_d, cand_i, n_cand)
        if n_res >= ef and d > res_d[0]:
            break
        hops += 1
        for idx in range(counts[v]):
            u = adj[v, idx]
            if visited[u] == stamp:
                continue
            visited[u] = stamp
            if evals >= budget:
                exhausted = True
                break
            du = _dist(ctx, node_ids[u])
            evals += 1
            if n_res < ef:
                n_res = _heap_push_max(res_d, res_i, n_res, du, u)
                n_cand = _heap_push_min(cand_d, cand_i, n_cand, du, u)
            elif du < res_d[0]:
                _heap_replace_max(res_d, res_i, n_res, du, u)
                n_cand = _heap_push_min(cand_d, cand_i, n_cand, du, u)

    out_d = res_d[:n_res].copy()
    out_i = res_i[:n_res].copy()
    # deterministic ordering: ascending (distance, global id)
    order = np.argsort(out_d, kind="mergesort")
    out_d = out_d[order]
    out_i = out_i[order]
    i = 0
    while i < n_res:
        j = i + 1
        while j < n_res and out_d[j] == out_d[i]:
            j += 1
        if j - i > 1:
            sub = np.argsort(node_ids[out_i[i:j]], kind="mergesort")
            out_i[i:j] = out_i[i:j][sub]
        i = j
    return out_i, out_d, evals, hops


@njit(cache=True)
def shrink_select(cand_locals, cand_dists, node_ids, recon, bound):
    """Diversity heuristic over candidates sorted by distance to the base vector.

    Keeps candidate c unless some already-kept s satisfies
    dist(c, s) <= dist(c, base); stops once `bound` are kept.
    """
    n = cand_locals.shape[0]
    keep = np.empty(min(bound, n), dtype=np.int32)
    kept = 0
    dim = recon.shape[1]
    for i in range(n):
        if kept >= bound:
            break
        c = cand_locals[i]
        crow = node_ids[c]
        ok = True
        for s in range(kept):
            srow = node_ids[keep[s]]
            acc = 0.0
            for t in range(dim):
                diff = recon[crow, t] - recon[srow, t]
                acc += diff * diff
            if acc <= cand_dists[i]:
                ok = False
                break
        if ok:
            keep[kept] = c
            kept += 1
    return keep[:kept].copy()


@njit(inline="always", cache=True)
def _recon_dist(recon, a, b):
    acc = 0.0
    for t in range(recon.shape[1]):
        diff = recon[a, t] - recon[b, t]
        acc += diff * diff
    return np.float32(acc)


@njit(cache=True)
def add_links_with_backlinks(adj, counts, node_ids, recon, new_local,
                             link_locals, bound):
    """Set the new node's links and back-link it into each neighbor's list.

    A neighbor with room appends the new node. A full neighbor re-shrinks:
    its list is viewed sorted by (decoded distance to the owner, id) and the
    diversity rule is applied around the newcomer — it must be closer to the
    owner than to every closer kept entry, and farther kept entries must
    stay closer to the owner than to it.
    """
    nlinks = link_locals.shape[0]
    for i in range(nlinks):
        adj[new_local, i] = link_locals[i]
    counts[new_local] = nlinks
    new_row = node_ids[new_local]
    width = adj.shape[1]
    sorted_ids = np.empty(width, dtype=np.int32)
    sorted_d = np.empty(width, dtype=np.float32)
    keep_ids = np.empty(width, dtype=np.int32)
    for i in range(nlinks):
        v = link_locals[i]
        k = counts[v]
        if k < bound:
            adj[v, k] = new_local
            counts[v] = k + 1
            continue
        vrow = node_ids[v]
        du = _recon_dist(recon, vrow, new_row)
        # sorted view of the current list by (distance to owner, id)
        for s in range(k):
            sorted_ids[s] = adj[v, s]
            sorted_d[s] = _recon_dist(recon, vrow, node_ids[adj[v, s]])
        for a in range(1, k):  # insertion sort, k <= bound is small
            did = sorted_ids[a]
            dd = sorted_d[a]
            b = a - 1
            while b >= 0 and (sorted_d[b] > dd or
                              (sorted_d[b] == dd and node_ids[sorted_ids[b]] > node_ids[did])):
                sorted_ids[b + 1] = sorted_ids[b]
                sorted_d[b + 1] = sorted_d[b]
                b -= 1
            sorted_ids[b + 1] = did
            sorted_d[b + 1] = dd
        p = 0
        while p < k and (sorted_d[p] < du or
                         (sorted_d[p] == du and node_ids[sorted_ids[p]] < new_row)):
            p += 1
        if p >= bound:
            continue  # the newcomer would be truncated right away
        accept = True
        for s in range(p):
            if _recon_dist(recon, new_row, node_ids[sorted_ids[s]]) <= du:
                accept = False
                break
        if not accept:
            continue
        w = 0
        for s in range(p):
            keep_ids[w] = sorted_ids[s]
            w += 1
        keep_ids[w] = new_local
        w += 1
        for s in range(p, k):
            if w >= bound:
                break
            if _recon_dist(recon, new_row, node_ids[sorted_ids[s]]) > sorted_d[s]:
                keep_ids[w] = sorted_ids[s]
                w += 1
        for s in range(w):
            adj[v, s] = keep_ids[s]
        counts[v] = w


@njit(cache=True)
def imi_scan(order1, order2, d1s, d2s, cell_offsets, entry_ids,
             kcells, budget, k_results, ctx):
    """Multi-sequence traversal of an inverted multi-index with a scan budget.

    Cells are visited in non-decreasing d1[c1]+d2[c2] order via the standard
    lattice merge over the two sorted half-space distance lists (pop (a,b),
    push (a+1,b) always and (a,b+1) only when a==0, so each lattice point is
    enqueued exactly once). Entries are scored through `ctx` (indexed by
    entry position, which is cell-sorted). Returns (ids, dists, evals,
    nonempty_cells_visited).
    """
    k1 = order1.shape[0]
    k2 = order2.shape[0]
    heap_cap = 1024
    hd = np.empty(heap_cap, dtype=np.float32)
    ha = np.empty(heap_cap, dtype=np.int32)
    hb = np.empty(heap_cap, dtype=np.int32)

    res_d = np.empty(k_results, dtype=np.float32)
    res_i = np.empty(k_results, dtype=np.int32)
    n_res = 0

    hd[0] = d1s[0] + d2s[0]
    ha[0] = 0
    hb[0] = 0
    n_heap = 1
    evals = 0
    cells = 0
    while n_heap > 0 and evals < budget:
        # pop min
        a = ha[0]
        b = hb[0]
        n_heap -= 1
        hd[0] = hd[n_heap]
        ha[0] = ha[n_heap]
        hb[0] = hb[n_heap]
        c = 0
        while True:
            l = 2 * c + 1
            if l >= n_heap:
                break
            r = l + 1
            s = l
            if r < n_heap and hd[r] < hd[l]:
                s = r
            if hd[c] <= hd[s]:
                break
            hd[c], hd[s] = hd[s], hd[c]
            ha[c], ha[s] = ha[s], ha[c]
            hb[c], hb[s] = hb[s], hb[c]
            c = s
        if n_heap + 2 > heap_cap:
            heap_cap *= 2
            nhd = np.empty(heap_cap, dtype=np.float32)
            nha = np.empty(heap_cap, dtype=np.int32)
            nhb = np.empty(heap_cap, dtype=np.int32)
            nhd[:n_heap] = hd[:n_heap]
            nha[:n_heap] = ha[:n_heap]
            nhb[:n_heap] = hb[:n_heap]
            hd, ha, hb = nhd, nha, nhb
        # push successors
        if a + 1 < k1:
            hd[n_heap] = d1s[a + 1] + d2s[b]
            ha[n_heap] = a + 1
            hb[n_heap] = b
            n_heap += 1
            c = n_heap - 1
            while c > 0:
                p = (c - 1) >> 1
                if hd[p] <= hd[c]:
                    break
                hd[p], hd[c] = hd[c], hd[p]
                ha[p], ha[c] = ha[c], ha[p]
                hb[p], hb[c] = hb[c], hb[p]
                c = p
        if a == 0 and b + 1 < k2:
            hd[n_heap] = d1s[0] + d2s[b + 1]
            ha[n_heap] = 0
            hb[n_heap] = b + 1
            n_heap += 1
            c = n_heap - 1
            while c > 0:
                p = (c - 1) >> 1
                if hd[p] <= hd[c]:
                    break
                hd[p], hd[c] = hd[c], hd[p]
                ha[p], ha[c] = ha[c], ha[p]
                hb[p], hb[c] = hb[c], hb[p]
                c = p
        cell = order1[a] * kcells + order2[b]
        lo = cell_offsets[cell]
        hi = cell_offsets[cell + 1]
        if hi > lo:
            cells += 1
        for e in range(lo, hi):
            if evals >= budget:
                break
            de = _dist(ctx, e)
            evals += 1
            if n_res < k_results:
                n_res = _heap_push_max(res_d, res_i, n_res, de, entry_ids[e])
            elif de < res_d[0]:
                _heap_replace_max(res_d, res_i, n_res, de, entry_ids[e])
    out_d = res_d[:n_res].copy()
    out_i = res_i[:n_res].copy()
    order = np.argsort(out_d, kind="mergesort")
    out_d = out_d[order]
    out_i = out_i[order]
    i = 0
    while i < n_res:
        j = i + 1
        while j < n_res and out_d[j] == out_d[i]:
            j += 1
        if j - i > 1:
            sub = np.argsort(out_i[i:j], kind="mergesort")
            out_i[i:j] = out_i[i:j][sub]
        i = j
    return out_i, out_d, evals, cells
