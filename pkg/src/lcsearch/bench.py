"""Experiment harness: dataset bundles, CSV emission, and the evaluation
commands behind the CLI (codec accuracy tables, estimator error quantiles,
memory trade-off sweeps, speed/recall curves).

Every CSV starts with '#'-prefixed comment lines echoing the originating
spec, so a run is reproducible from the file alone (wall-clock columns
aside).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import refine
from .codec import decode_blocked, encode_blocked, train_codec
from .dataset import (GroundTruth, VectorSet, brute_force_knn, read_ground_truth,
                      read_vectors, synth_dataset, synth_manifold)
from .imi import ImiIndex, imi_build
from .index import LCConfig, LCIndex, build as build_index
from .kmeans import kmeans_train_two_stage
from .metrics import recall_at


def write_csv(path, comments: list[str], columns: list[str], rows: list[tuple]) -> None:
    with open(path, "w") as f:
        for c in comments:
            f.write(f"# {c}\n")
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def read_csv(path) -> tuple[list[str], list[str], list[list[str]]]:
    comments, columns, rows = [], [], []
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("#"):
                comments.append(line[1:].strip())
            elif not columns:
                columns = line.split(",")
            elif line:
                rows.append(line.split(","))
    return comments, columns, rows


@dataclass
class Bundle:
    learn: VectorSet
    base: VectorSet
    queries: VectorSet
    gt: GroundTruth


def load_bundle(base=None, learn=None, query=None, gt=None, preset=None,
                seed: int = 0, gt_depth: int = 100, verbose: bool = True) -> Bundle:
    """Assemble learn/base/query/gt from files or a synthetic preset.

    Preset 'tiny' generates a 100k-vector 96-d synthetic workload; missing
    ground truth is computed by brute force (with a warning, since it can
    be slow).
    """
    if preset == "tiny":
        data = synth_dataset(112_000, 96, 2000, seed)
        base_vs = VectorSet(data.data[:100_000])
        learn_vs = VectorSet(data.data[100_000:111_000])
        query_vs = VectorSet(data.data[111_000:])
    elif preset == "tiny-manifold":
        data = synth_manifold(112_000, 96, 12, seed, noise=0.02)
        base_vs = VectorSet(data.data[:100_000])
        learn_vs = VectorSet(data.data[100_000:111_000])
        query_vs = VectorSet(data.data[111_000:])
    elif preset is not None:
        raise ValueError(f"unknown preset {preset!r}")
    else:
        if base is None:
            raise ValueError("need --base or --preset")
        base_vs = read_vectors(base)
        learn_vs = read_vectors(learn) if learn else None
        query_vs = read_vectors(query) if query else None
    gt_obj = None
    if gt is not None and preset is None:
        gt_obj = read_ground_truth(gt)
    if gt_obj is None and query_vs is not None:
        if verbose:
            print("# no ground truth supplied; computing by brute force", flush=True)
        gt_obj = brute_force_knn(base_vs, query_vs, min(gt_depth, base_vs.count))
    return Bundle(learn_vs, base_vs, query_vs, gt_obj)


def cmd_codec_eval(bundle: Bundle, specs: list[str], seed: int = 0,
                   opq_iters: int = 20, kmeans_iters: int = 25,
                   coarse_exact: bool = False,
                   ranks: tuple[int, ...] = (1, 10)) -> tuple[list[str], list[tuple]]:
    """Exhaustive-search codec accuracy: encode+decode the base set, scan it
    exactly, report recall against the true neighbors."""
    learn = bundle.learn if bundle.learn is not None else bundle.base
    cols = ["codec", "bytes"] + [f"recall@{r}" for r in ranks]
    rows = []
    for spec in specs:
        codec = train_codec(spec, learn.data, seed=seed, opq_iters=opq_iters,
                            kmeans_iters=kmeans_iters, coarse_exact=coarse_exact)
        decoded = decode_blocked(codec, encode_blocked(codec, bundle.base.data))
        res = brute_force_knn(VectorSet(decoded), bundle.queries, max(ranks))
        m = recall_at(res.neighbors, bundle.gt, ranks)
        rows.append((spec, codec.code_bytes, *[m.recall_at[r] for r in ranks]))
    return cols, rows


def cmd_estimators(base: VectorSet, learn: VectorSet | None = None, k: int = 8,
                   centroids: int = 16384, seed: int = 0,
                   quantiles: np.ndarray | None = None) -> tuple[list[str], list[tuple], dict]:
    """Error quantiles for the vector estimators: nearest centroid (codebook
    on the set itself and, when a learn set is given, on the distinct set),
    nearest neighbor, shared-weight average of the k exact neighbors, and
    the per-vector least-squares combination."""
    n = base.count
    if centroids > n // 2:
        import warnings
        centroids = max(16, n // 8)
        warnings.warn(f"base too small for the requested codebook; using {centroids} centroids")
    gt = brute_force_knn(base, base, k + 1)
    if not (gt.neighbors[:, 0] == np.arange(n)).all():
        raise ValueError("self must be its own nearest neighbor (duplicate handling)")
    nbr = gt.neighbors[:, 1:]
    km = kmeans_train_two_stage(base.data, centroids, iters=10, seed=seed)
    errs = refine.estimator_suite(base.data, nbr, km)
    if learn is not None:
        km_star = kmeans_train_two_stage(learn.data, min(centroids, learn.count // 2),
                                         iters=10, seed=seed + 1)
        from .kmeans import nearest_centroids
        _, d = nearest_centroids(base.data, km_star.centroids)
        errs["q_star"] = d.astype(np.float64)
    qs = np.linspace(0.01, 0.99, 99) if quantiles is None else quantiles
    names = ["q", "q_star", "n1", "xbar", "xhat"]
    names = [nm for nm in names if nm in errs]
    cols = ["quantile"] + [f"err_{nm}" for nm in names]
    rows = [(float(q), *[float(np.quantile(errs[nm], q)) for nm in names]) for q in qs]
    medians = {nm: float(np.median(errs[nm])) for nm in names}
    return cols, rows, medians


def reconstruction_error(index: LCIndex, sample_vectors: np.ndarray,
                         sample_ids: np.ndarray, refined: bool) -> float:
    """Mean squared reconstruction error over a sample of base ids, using the
    representation the index re-ranks with (or the plain codec decode)."""
    if refined:
        rec = index._refined_reconstruction(np.asarray(sample_ids, dtype=np.int64))
    else:
        rec = index.codec.decode(index.codes[sample_ids])
    d = sample_vectors.astype(np.float64) - rec.astype(np.float64)
    return float((d * d).sum(axis=1).mean())


def sweep_recall(searcher, queries: VectorSet, gt: GroundTruth, T_list: list[int],
                 k_results: int = 100, ef: int | None = None,
                 ranks: tuple[int, ...] = (1, 10, 100)) -> list[dict]:
    """recall/evals rows for a T sweep; `searcher(q, T) -> (SearchResult, VisitStats)`.

    The beam width is pinned to max(T_list) across the sweep so T is the only
    knob that moves, making recall monotone by construction.
    """
    out = []
    for T in T_list:
        ids = []
        evals = 0
        t0 = time.perf_counter()
        for i in range(queries.count):
            res, st = searcher(queries.data[i], T)
            ids.append(res.ids)
            evals += st.base_distance_evals
        dt = (time.perf_counter() - t0) * 1000.0 / queries.count
        m = recall_at(ids, gt, ranks)
        out.append(dict(T=T, ms_per_query=dt, mean_evals=evals / queries.count,
                        **{f"recall@{r}": m.recall_at[r] for r in ranks}))
    return out


def cmd_tradeoff_sweep(bundle: Bundle, budget: int, entries: list[tuple[int, int, int, bool]],
                       T_list: list[int], seed: int = 0, em_sample: int = 250_000,
                       em_iters: int = 10, ef_construction: int = 200,
                       error_sample: int = 100_000, verbose: bool = False,
                       opq_iters: int = 20) -> tuple[list[str], list[tuple]]:
    """One index per (links, code_bytes, M, refined) entry under a fixed
    per-vector byte budget; reports recall@1 per T plus reconstruction error."""
    cols = ["config", "links", "code_bytes", "M", "T", "recall@1", "error", "ms_per_query"]
    rows = []
    rng = np.random.default_rng(seed + 99)
    n = bundle.base.count
    sample_ids = np.sort(rng.choice(n, size=min(error_sample, n), replace=False))
    sample_vecs = bundle.base.data[sample_ids]
    built: dict[tuple[int, int, int], LCIndex] = {}
    for links, code_bytes, M, refined in entries:
        total = 4 * links + code_bytes + M
        if total != budget:
            raise ValueError(
                f"(links={links}, code={code_bytes}, M={M}) sums to {total}, budget {budget}")
        key = (links, code_bytes, M)
        if key not in built:
            cfg = LCConfig(links=links, codec_spec=f"OPQ{code_bytes}x8", M=M,
                           seed=seed, train_sample=em_sample, em_iters=em_iters,
                           ef_construction=ef_construction, opq_iters=opq_iters)
            built[key] = build_index(bundle.learn, bundle.base, cfg, verbose=verbose)
        index = built[key]
        label = f"L{links}&OPQ{code_bytes}" + (f",M={M}" if refined else "")
        err = reconstruction_error(index, sample_vecs, sample_ids, refined)
        shortlist = index.config.refine_shortlist if refined else 0
        ef = max(T_list)
        curve = sweep_recall(
            lambda q, T: index.search(q, T, k_results=10, ef=ef, refine_shortlist=shortlist),
            bundle.queries, bundle.gt, T_list, ranks=(1, 10))
        for row in curve:
            rows.append((label, links, code_bytes, M if refined else 0, row["T"],
                         row["recall@1"], err, row["ms_per_query"]))
    return cols, rows


def cmd_speed_recall(bundle: Bundle, lc_index: LCIndex | None, imi_index: ImiIndex | None,
                     T_list: list[int], runs: int = 3,
                     k_results: int = 100) -> tuple[list[str], list[tuple]]:
    """Single-worker timing loop, median of `runs` passes per (method, T)."""
    cols = ["method", "bytes_per_vector", "T", "ms_per_query", "mean_evals",
            "recall@1", "recall@10", "recall@100"]
    rows = []
    methods = []
    if lc_index is not None:
        bpv = lc_index.stats()["bytes_per_vector"]
        ef = max(T_list)
        methods.append((lc_index.notation(), bpv,
                        lambda q, T: lc_index.search(q, T, k_results=k_results, ef=ef)))
    if imi_index is not None:
        bpv = imi_index.entry_codes.shape[1]
        methods.append((f"IMI(K={imi_index.K})", bpv,
                        lambda q, T: imi_index.search(q, T, k_results=k_results)))
    for name, bpv, fn in methods:
        for T in T_list:
            times = []
            for _ in range(runs):
                t0 = time.perf_counter()
                ids = []
                evals = 0
                for i in range(bundle.queries.count):
                    res, st = fn(bundle.queries.data[i], T)
                    ids.append(res.ids)
                    evals += st.base_distance_evals
                times.append((time.perf_counter() - t0) * 1000.0 / bundle.queries.count)
            m = recall_at(ids, bundle.gt, (1, 10, 100))
            rows.append((name, bpv, T, float(np.median(times)), evals / bundle.queries.count,
                         m.recall_at[1], m.recall_at[10], m.recall_at[100]))
    return cols, rows


def evals_at_recall(curve: list[dict], target: float, rank: int = 1) -> float | None:
    """Smallest mean eval count reaching the target recall, by linear
    interpolation along the sweep; None when never reached."""
    key = f"recall@{rank}"
    pts = sorted(((row["mean_evals"], row[key]) for row in curve))
    prev_x, prev_y = None, None
    for x, y in pts:
        if y >= target:
            if prev_x is None or prev_y is None or y == prev_y:
                return float(x)
            frac = (target - prev_y) / (y - prev_y)
            return float(prev_x + frac * (x - prev_x))
        prev_x, prev_y = x, y
    return None


def plot_csv(path, out_path, x: str, ys: list[str], group: str | None = None,
             logx: bool = False, title: str | None = None) -> None:
    """Line chart from a harness CSV, written as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    comments, columns, rows = read_csv(path)
    ix = columns.index(x)
    fig, ax = plt.subplots(figsize=(7, 5))
    groups: dict[str, list] = {}
    for row in rows:
        key = row[columns.index(group)] if group else ""
        groups.setdefault(key, []).append(row)
    for key, grows in groups.items():
        for y in ys:
            iy = columns.index(y)
            xs = [float(r[ix]) for r in grows]
            vals = [float(r[iy]) for r in grows]
            label = f"{key} {y}".strip()
            ax.plot(xs, vals, marker="o", label=label)
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(x)
    ax.set_ylabel(", ".join(ys))
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
