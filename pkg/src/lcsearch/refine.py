"""Reconstruction refinement from graph neighbors.

A stored vector x is approximated by a weighted combination of the decoded
reconstructions of itself and its k base-level graph neighbors, stacked as
the design matrix G(x) = [q(x), q(g_1), ..., q(g_k)] (neighbor rows ordered
by increasing decoded distance to x; under-linked nodes pad with q(x), the
resulting rank deficiency is absorbed by ridge damping).

Two refinement flavors:
  * a single shared weight vector solved in closed form over a training
    sample (costs no per-vector storage; recomputed at query time for
    shortlist members only), and
  * a product regression codebook: M sub-spaces, each with B=256 learned
    weight vectors, trained by alternating assignment (pick the codeword
    minimizing the reconstruction error) and per-cluster closed-form weight
    updates; each vector then stores M one-byte codeword choices.

Serialization format "LCR1": M, B, k, sub_dim headers then float32 weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kmeans import kmeans_train, nearest_centroids
from .serial import Reader, Writer

MAGIC = b"LCR1"
DEFAULT_DAMPING = 1e-6


class RefineError(ValueError):
    pass


@dataclass
class SharedBeta:
    weights: np.ndarray  # (rows,) float64
    degenerate: bool = False

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)


@dataclass
class RegressionCodebook:
    betas: np.ndarray  # (M, B, rows) float32
    dim: int
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.betas = np.ascontiguousarray(self.betas, dtype=np.float32)
        if self.dim % self.betas.shape[0]:
            raise RefineError(f"dim {self.dim} not divisible by M={self.betas.shape[0]}")

    @property
    def M(self) -> int:
        return self.betas.shape[0]

    @property
    def B(self) -> int:
        return self.betas.shape[1]

    @property
    def rows(self) -> int:
        return self.betas.shape[2]

    @property
    def sub_dim(self) -> int:
        return self.dim // self.M

    def to_bytes(self) -> bytes:
        w = Writer()
        w.magic(MAGIC)
        w.u32(self.M)
        w.u32(self.B)
        w.u32(self.rows - 1)  # k graph links
        w.u32(self.sub_dim)
        w.array(self.betas, np.float32)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RegressionCodebook":
        r = Reader(raw)
        r.magic(MAGIC)
        m = r.u32()
        b = r.u32()
        k = r.u32()
        sub_dim = r.u32()
        betas = r.array((m, b, k + 1), np.float32)
        return cls(betas, dim=m * sub_dim)


def solve_least_squares(targets: np.ndarray, designs: np.ndarray,
                        damping: float = DEFAULT_DAMPING) -> SharedBeta:
    """Weights minimizing sum_i ||x_i - beta^T G_i||^2 over stacked designs.

    targets: (n, d); designs: (n, rows, d). Solved by ridge-damped normal
    equations with lambda = damping * trace / rows, which matches the
    pseudo-inverse solution when the system is well conditioned.
    """
    x = np.asarray(targets, dtype=np.float64)
    g = np.asarray(designs, dtype=np.float64)
    if x.ndim != 2 or g.ndim != 3 or g.shape[0] != x.shape[0] or g.shape[2] != x.shape[1]:
        raise RefineError(f"bad shapes: targets {x.shape}, designs {g.shape}")
    rows = g.shape[1]
    if x.shape[0] * x.shape[1] < rows:
        raise RefineError("system is underdetermined: need n*d >= rows")
    a = np.einsum("nrd,nsd->rs", g, g)
    b = np.einsum("nrd,nd->r", g, x)
    return _solve_damped(a, b, damping)


def _solve_damped(a: np.ndarray, b: np.ndarray, damping: float = DEFAULT_DAMPING) -> SharedBeta:
    rows = a.shape[0]
    tr = float(np.trace(a))
    if tr <= 0.0:
        e0 = np.zeros(rows)
        e0[0] = 1.0
        return SharedBeta(e0, degenerate=True)
    lam = damping * tr / rows
    beta = np.linalg.solve(a + lam * np.eye(rows), b)
    return SharedBeta(beta)


def neighbor_ids_from_graph(graph, k: int | None = None) -> np.ndarray:
    """(n, k) int32 base-level out-neighbor ids, padded with the node's own id."""
    base = graph.levels[0]
    k = graph.k_base if k is None else k
    n = base.size
    out = np.empty((n, k), dtype=np.int32)
    own = base.node_ids
    for i in range(n):
        cnt = min(int(base.counts[i]), k)
        out[i, :cnt] = base.node_ids[base.adj[i, :cnt]]
        out[i, cnt:] = own[i]
    return out


def design_ids(graph, ids: np.ndarray, recon: np.ndarray,
               k: int | None = None, block: int = 8192) -> np.ndarray:
    """(len(ids), k+1) design row ids: own id first, then graph neighbors
    ordered by increasing decoded distance (ties by id)."""
    k = graph.k_base if k is None else k
    ids = np.asarray(ids, dtype=np.int64)
    base = graph.levels[0]
    out = np.empty((ids.size, k + 1), dtype=np.int32)
    out[:, 0] = ids
    for lo in range(0, ids.size, block):
        sel = ids[lo:lo + block]
        nbr = np.empty((sel.size, k), dtype=np.int32)
        for j, i in enumerate(sel):
            loc = base.local_of[i]
            cnt = min(int(base.counts[loc]), k)
            nbr[j, :cnt] = base.node_ids[base.adj[loc, :cnt]]
            nbr[j, cnt:] = i
        d = ((recon[nbr] - recon[sel][:, None, :]) ** 2).sum(axis=2)
        # stable sort by (distance, id): pre-sort columns by id then by distance
        id_order = np.argsort(nbr, axis=1, kind="stable")
        nbr = np.take_along_axis(nbr, id_order, axis=1)
        d = np.take_along_axis(d, id_order, axis=1)
        order = np.argsort(d, axis=1, kind="stable")
        out[lo:lo + block, 1:] = np.take_along_axis(nbr, order, axis=1)
    return out


def compute_shared_beta(targets: np.ndarray, g_ids: np.ndarray, recon: np.ndarray,
                        damping: float = DEFAULT_DAMPING,
                        block: int = 16384) -> SharedBeta:
    """Closed-form shared weights over (target, design-id) pairs, accumulated
    in blocks so the stacked design never materializes."""
    x = np.asarray(targets)
    rows = g_ids.shape[1]
    if x.shape[0] < 1 or x.shape[0] * x.shape[1] < rows:
        raise RefineError("training sample too small for the design size")
    a = np.zeros((rows, rows), dtype=np.float64)
    b = np.zeros(rows, dtype=np.float64)
    for lo in range(0, x.shape[0], block):
        g = recon[g_ids[lo:lo + block]].astype(np.float64)
        xb = x[lo:lo + block].astype(np.float64)
        a += np.einsum("nrd,nsd->rs", g, g)
        b += np.einsum("nrd,nd->r", g, xb)
    return _solve_damped(a, b, damping)


def combine(beta_weights: np.ndarray, g_ids: np.ndarray, recon: np.ndarray) -> np.ndarray:
    """beta^T G(x) for each row of g_ids (shared weights)."""
    g = recon[g_ids]
    return np.einsum("r,nrd->nd", beta_weights.astype(np.float32), g)


def _sub_stats(targets, g_ids, recon, m_idx, sub_dim, block=16384):
    """Per-vector quadratic statistics for one sub-space:
    H_i = G_i G_i^T, g_i = G_i x_i, x2_i = ||x_i||^2 (all restricted to the slice)."""
    sl = slice(m_idx * sub_dim, (m_idx + 1) * sub_dim)
    n, rows = g_ids.shape
    H = np.empty((n, rows, rows), dtype=np.float64)
    gv = np.empty((n, rows), dtype=np.float64)
    x2 = np.empty(n, dtype=np.float64)
    for lo in range(0, n, block):
        g = recon[g_ids[lo:lo + block], sl].astype(np.float64)
        xb = np.asarray(targets[lo:lo + block, sl], dtype=np.float64)
        H[lo:lo + block] = np.einsum("nrd,nsd->nrs", g, g)
        gv[lo:lo + block] = np.einsum("nrd,nd->nr", g, xb)
        x2[lo:lo + block] = (xb * xb).sum(axis=1)
    return H, gv, x2


def _per_vector_betas(H, gv, damping=DEFAULT_DAMPING):
    rows = H.shape[1]
    tr = np.einsum("nrr->n", H)
    lam = damping * np.maximum(tr, 1e-30) / rows
    A = H + lam[:, None, None] * np.eye(rows)
    return np.linalg.solve(A, gv[..., None])[..., 0]


def _assign(H, gv, x2, W, block=16384):
    """Errors argmin over codewords W (B, rows); returns labels and loss.

    err(i, b) = x2_i - 2 g_i.W_b + W_b.H_i.W_b; the quadratic term is one
    matmul against the flattened outer products of the codewords.
    """
    n, rows = H.shape[0], H.shape[1]
    wq = (W[:, :, None] * W[:, None, :]).reshape(W.shape[0], rows * rows)
    labels = np.empty(n, dtype=np.int64)
    loss = 0.0
    for lo in range(0, n, block):
        err = H[lo:lo + block].reshape(-1, rows * rows) @ wq.T
        err -= 2.0 * (gv[lo:lo + block] @ W.T)
        err += x2[lo:lo + block, None]
        lab = err.argmin(axis=1)
        labels[lo:lo + block] = lab
        loss += float(np.take_along_axis(err, lab[:, None], axis=1).sum())
    return labels, loss


def train_regression_codebook(targets: np.ndarray, g_ids: np.ndarray,
                              recon: np.ndarray, M: int, B: int = 256,
                              iters: int = 10, seed: int = 0,
                              init_kmeans_iters: int = 10) -> RegressionCodebook:
    """EM-style product regression codebook.

    Per sub-space: k-means on per-vector least-squares weights initializes
    the codebook; then `iters` rounds alternate assignment (codeword
    minimizing each vector's reconstruction error) with per-cluster
    closed-form weight updates. Updates keep the old codeword when the
    closed-form refit does not improve that cluster's loss, so the recorded
    total loss is non-increasing. Empty clusters re-seed from the worst
    reconstructed vector's per-vector weights.
    """
    x = np.asarray(targets)
    n, d = x.shape
    if d % M:
        raise RefineError(f"dim {d} not divisible by M={M}")
    rows = g_ids.shape[1]
    if n < B:
        import warnings
        warnings.warn(f"training sample ({n}) smaller than codebook size ({B})")
    sub_dim = d // M
    betas = np.empty((M, B, rows), dtype=np.float32)
    losses = None
    for j in range(M):
        H, gv, x2 = _sub_stats(x, g_ids, recon, j, sub_dim)
        pv = _per_vector_betas(H, gv)
        km = kmeans_train(pv.astype(np.float32), min(B, n), iters=init_kmeans_iters,
                          seed=seed + j)
        W = km.centroids.astype(np.float64)
        if W.shape[0] < B:  # degenerate tiny samples: duplicate-pad
            W = np.concatenate([W, np.repeat(W[-1:], B - W.shape[0], axis=0)])
        hist = []
        labels, loss = _assign(H, gv, x2, W)
        hist.append(loss)
        for _ in range(iters):
            # update step; a cluster keeps its old codeword unless the refit
            # clearly improves it (margin swamps cross-expression fp noise,
            # keeping the recorded loss monotone)
            cur_err = None
            for bkt in range(B):
                members = np.flatnonzero(labels == bkt)
                if members.size == 0:
                    if cur_err is None:
                        wl = W[labels]
                        cur_err = x2 - 2 * np.einsum("nr,nr->n", gv, wl) + \
                            np.einsum("nr,nrs,ns->n", wl, H, wl)
                    worst = int(cur_err.argmax())
                    W[bkt] = pv[worst]
                    cur_err[worst] = -np.inf
                    continue
                A = H[members].sum(axis=0)
                rhs = gv[members].sum(axis=0)
                cand = _solve_damped(A, rhs).weights
                old_loss = W[bkt] @ A @ W[bkt] - 2.0 * rhs @ W[bkt]
                new_loss = cand @ A @ cand - 2.0 * rhs @ cand
                if new_loss < old_loss - 1e-7 * (abs(old_loss) + 1.0):
                    W[bkt] = cand
            labels, loss = _assign(H, gv, x2, W)
            hist.append(loss)
        betas[j] = W.astype(np.float32)
        losses = hist if losses is None else [a + b for a, b in zip(losses, hist)]
    return RegressionCodebook(betas, dim=d, loss_history=losses or [])


def assign_beta_codes(targets: np.ndarray, g_ids: np.ndarray, recon: np.ndarray,
                      book: RegressionCodebook) -> np.ndarray:
    """Per-vector codeword choices, (n, M) uint8 for B<=256."""
    x = np.asarray(targets)
    out = np.empty((x.shape[0], book.M), dtype=np.uint8)
    for j in range(book.M):
        H, gv, x2 = _sub_stats(x, g_ids, recon, j, book.sub_dim)
        labels, _ = _assign(H, gv, x2, book.betas[j].astype(np.float64))
        out[:, j] = labels
    return out


def refine_reconstruct(g_ids: np.ndarray, recon: np.ndarray,
                       book: RegressionCodebook | None,
                       beta_codes: np.ndarray | None,
                       shared: SharedBeta | None = None) -> np.ndarray:
    """Refined reconstruction per row of g_ids.

    With a codebook: per sub-space j the stored codeword's weights combine
    the corresponding columns of G(x). Without one (M=0), falls back to the
    shared weight vector.
    """
    g = recon[np.asarray(g_ids)]
    if book is None:
        if shared is None:
            raise RefineError("need either a regression codebook or shared weights")
        return np.einsum("r,nrd->nd", shared.weights.astype(np.float32), g)
    codes = np.asarray(beta_codes)
    if codes.ndim == 1:
        codes = codes[None, :]
    if codes.shape[1] != book.M:
        raise RefineError(f"beta codes have {codes.shape[1]} entries, expected {book.M}")
    n = g.shape[0]
    out = np.empty((n, book.dim), dtype=np.float32)
    for j in range(book.M):
        sl = slice(j * book.sub_dim, (j + 1) * book.sub_dim)
        w = book.betas[j][codes[:, j]]  # (n, rows)
        out[:, sl] = np.einsum("nr,nrd->nd", w, g[:, :, sl])
    return out


def estimator_suite(data: np.ndarray, neighbor_ids: np.ndarray,
                    centroid_codebook, block: int = 8192) -> dict[str, np.ndarray]:
    """Squared reconstruction errors for the four estimators of each vector:
    nearest centroid, nearest neighbor, shared-weight combination of the k
    exact neighbors, and the per-vector least-squares combination.

    neighbor_ids: (n, k) exact nearest neighbors (self excluded), ascending.
    """
    x = np.ascontiguousarray(data, dtype=np.float32)
    nbr = np.asarray(neighbor_ids)
    n, k = nbr.shape
    _, cd = nearest_centroids(x, centroid_codebook.centroids)
    err_q = cd.astype(np.float64)
    err_n1 = ((x[nbr[:, 0]].astype(np.float64) - x.astype(np.float64)) ** 2).sum(axis=1)
    shared = compute_shared_beta(x, nbr, x)
    xbar = np.empty_like(x)
    for lo in range(0, n, block):
        xbar[lo:lo + block] = combine(shared.weights, nbr[lo:lo + block], x)
    err_xbar = ((x.astype(np.float64) - xbar) ** 2).sum(axis=1)
    err_xhat = np.empty(n, dtype=np.float64)
    for lo in range(0, n, block):
        g = x[nbr[lo:lo + block]].astype(np.float64)
        xb = x[lo:lo + block].astype(np.float64)
        H = np.einsum("nrd,nsd->nrs", g, g)
        gv = np.einsum("nrd,nd->nr", g, xb)
        beta = _per_vector_betas(H, gv, damping=1e-10)
        err = (xb * xb).sum(axis=1) - 2 * np.einsum("nr,nr->n", gv, beta) + \
            np.einsum("nr,nrs,ns->n", beta, H, beta)
        err_xhat[lo:lo + block] = np.maximum(err, 0.0)
    return {"q": err_q, "n1": err_n1, "xbar": err_xbar, "xhat": err_xhat}


def save_codebook(book: RegressionCodebook, path) -> None:
    with open(path, "wb") as f:
        f.write(book.to_bytes())


def load_codebook(path) -> RegressionCodebook:
    with open(path, "rb") as f:
        return RegressionCodebook.from_bytes(f.read())
