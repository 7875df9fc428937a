"""Command-line front end.

Subcommands cover the whole workflow: synthetic data and ground truth
(`synth`, `gt`), codec training and evaluation (`train-codec`, `codec-eval`),
index construction and search (`build-index`, `train-regression`, `search`),
the inverted multi-index baseline (`imi-build`, `imi-search`), the analysis
commands (`estimators`, `tradeoff-sweep`, `speed-recall`) and `plot` for
turning harness CSVs into SVG charts.

Commands print their CSV to --out (default stdout-adjacent file) with the
full invocation echoed in '#' comments.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import bench, refine
from .codec import save_codec, load_codec, train_codec, encode_blocked
from .dataset import (VectorSet, brute_force_knn, read_vectors, synth_dataset,
                      synth_manifold, write_ground_truth, write_vectors)
from .imi import imi_build, load_imi, save_imi
from .index import LCConfig, build as build_index, load_index, parse_lc_config, save_index
from .stores import CodedStore


def _spec_comment(args) -> list[str]:
    items = " ".join(f"{k}={v}" for k, v in sorted(vars(args).items())
                     if k != "func" and v is not None)
    return [f"lcsearch {args.command}", items]


def _add_dataset_flags(p, queries=True):
    p.add_argument("--base", help="base vectors (.fvecs/.bvecs)")
    p.add_argument("--learn", help="training vectors")
    if queries:
        p.add_argument("--query", help="query vectors")
        p.add_argument("--gt", help="ground-truth ids (.ivecs)")
    p.add_argument("--preset", choices=["tiny", "tiny-manifold"],
                   help="synthetic desk-scale preset instead of files")


def _bundle(args, queries=True):
    return bench.load_bundle(
        base=args.base, learn=args.learn,
        query=getattr(args, "query", None) if queries else None,
        gt=getattr(args, "gt", None) if queries else None,
        preset=args.preset, seed=args.seed)


def cmd_synth(args):
    if args.manifold_dim:
        vs = synth_manifold(args.n, args.d, args.manifold_dim, args.seed, args.noise)
    else:
        vs = synth_dataset(args.n, args.d, args.clusters, args.seed)
    write_vectors(args.out, vs, fmt="fvecs")
    print(f"wrote {vs.count} x {vs.dim} vectors to {args.out}")


def cmd_gt(args):
    base = read_vectors(args.base)
    queries = read_vectors(args.query)
    gt = brute_force_knn(base, queries, args.k)
    write_ground_truth(args.out, gt)
    print(f"wrote {gt.query_count} x {gt.depth} ground truth to {args.out}")


def cmd_train_codec(args):
    learn = read_vectors(args.learn)
    codec = train_codec(args.spec, learn.data, seed=args.seed,
                        opq_iters=args.opq_iters, kmeans_iters=args.kmeans_iters,
                        coarse_exact=args.coarse_exact)
    save_codec(codec, args.out)
    print(f"trained {codec.spec}: {codec.code_bytes} bytes/vector -> {args.out}")


def cmd_codec_eval(args):
    bundle = _bundle(args)
    cols, rows = bench.cmd_codec_eval(
        bundle, args.specs, seed=args.seed, opq_iters=args.opq_iters,
        kmeans_iters=args.kmeans_iters, coarse_exact=args.coarse_exact)
    bench.write_csv(args.out, _spec_comment(args), cols, rows)
    for row in rows:
        print(",".join(bench._fmt(v) for v in row))
    print(f"wrote {args.out}")


def cmd_build_index(args):
    bundle = _bundle(args, queries=False)
    config = parse_lc_config(args.config, seed=args.seed,
                             refine_shortlist=args.refine,
                             ef_construction=args.efC,
                             train_sample=args.sample,
                             em_iters=args.iters,
                             coarse_exact=args.coarse_exact)
    learn = bundle.learn if bundle.learn is not None else bundle.base
    index = build_index(learn, bundle.base, config, verbose=args.verbose)
    save_index(index, args.out)
    st = index.stats()
    print(f"built {st['notation']}: {st['count']} vectors, "
          f"{st['bytes_per_vector']} bytes/vector -> {args.out}")


def cmd_train_regression(args):
    """Retrain the regression codebook of an existing index (M, B, iters)."""
    index = load_index(args.index)
    base = read_vectors(args.base)
    if base.count != index.count:
        raise SystemExit("--base must be the vectors the index was built from")
    store = CodedStore(index.codec, index.codes, materialize_recon=True)
    recon = store.recon()
    rng = np.random.default_rng(args.seed + 17)
    sample = np.sort(rng.choice(index.count, size=min(args.sample, index.count),
                                replace=False))
    g_ids = refine.design_ids(index.graph, sample, recon)
    book = refine.train_regression_codebook(
        base.data[sample], g_ids, recon, M=args.M, B=args.B,
        iters=args.iters, seed=args.seed + 17)
    all_ids = refine.design_ids(index.graph, np.arange(index.count), recon)
    beta_codes = refine.assign_beta_codes(base.data, all_ids, recon, book)
    index.config.M = args.M
    index.config.B = args.B
    index.book = book
    index.beta_codes = beta_codes
    save_index(index, args.out or args.index)
    print(f"regression codebook M={args.M} B={args.B} trained; "
          f"loss {book.loss_history[0]:.1f} -> {book.loss_history[-1]:.1f}")


def cmd_search(args):
    index = load_index(args.index)
    queries = read_vectors(args.query)
    rows = []
    for i in range(queries.count):
        res, st = index.search(queries.data[i], T=args.T, k_results=args.k,
                               ef=args.ef)
        for rank, (rid, dist) in enumerate(zip(res.ids, res.dists), 1):
            rows.append((i, rank, int(rid), float(dist), st.base_distance_evals))
    bench.write_csv(args.out, _spec_comment(args),
                    ["query", "rank", "id", "distance", "base_evals"], rows)
    print(f"searched {queries.count} queries -> {args.out}")


def cmd_estimators(args):
    bundle = _bundle(args, queries=False)
    cols, rows, medians = bench.cmd_estimators(
        bundle.base, learn=bundle.learn, k=args.k,
        centroids=args.centroids, seed=args.seed)
    bench.write_csv(args.out, _spec_comment(args) +
                    [f"median {k}={v:.6g}" for k, v in medians.items()], cols, rows)
    print(" ".join(f"median[{k}]={v:.4f}" for k, v in medians.items()))
    print(f"wrote {args.out}")


def cmd_tradeoff_sweep(args):
    bundle = _bundle(args)
    entries = []
    for item in args.entries:
        # links:code:M[:refined]; refined defaults to true when M>0
        parts = item.split(":")
        links, code, m = int(parts[0]), int(parts[1]), int(parts[2])
        refined = (len(parts) > 3 and parts[3] == "r") or \
            (len(parts) <= 3 and m > 0)
        entries.append((links, code, m, refined))
    cols, rows = bench.cmd_tradeoff_sweep(
        bundle, args.budget, entries, T_list=args.T, seed=args.seed,
        em_sample=args.sample, em_iters=args.iters,
        ef_construction=args.efC, verbose=args.verbose,
        opq_iters=args.opq_iters)
    bench.write_csv(args.out, _spec_comment(args), cols, rows)
    print(f"wrote {args.out}")


def cmd_speed_recall(args):
    bundle = _bundle(args)
    lc = load_index(args.index) if args.index else None
    imi = load_imi(args.imi) if args.imi else None
    if lc is None and imi is None:
        raise SystemExit("need --index and/or --imi")
    cols, rows = bench.cmd_speed_recall(bundle, lc, imi, T_list=args.T,
                                        runs=args.runs)
    bench.write_csv(args.out, _spec_comment(args), cols, rows)
    for row in rows:
        print(",".join(bench._fmt(v) for v in row))
    print(f"wrote {args.out}")


def cmd_imi_build(args):
    bundle = _bundle(args, queries=False)
    learn = bundle.learn if bundle.learn is not None else bundle.base
    index = imi_build(learn, bundle.base, K=args.K, fine_spec=args.fine,
                      seed=args.seed, kmeans_iters=args.kmeans_iters,
                      opq_iters=args.opq_iters)
    save_imi(index, args.out)
    print(f"built IMI K={args.K} fine={args.fine}: {index.count} vectors -> {args.out}")


def cmd_imi_search(args):
    index = load_imi(args.index)
    queries = read_vectors(args.query)
    rows = []
    for i in range(queries.count):
        res, st = index.search(queries.data[i], T=args.T, k_results=args.k)
        for rank, (rid, dist) in enumerate(zip(res.ids, res.dists), 1):
            rows.append((i, rank, int(rid), float(dist), st.base_distance_evals))
    bench.write_csv(args.out, _spec_comment(args),
                    ["query", "rank", "id", "distance", "base_evals"], rows)
    print(f"searched {queries.count} queries -> {args.out}")


def cmd_plot(args):
    bench.plot_csv(args.csv, args.out, x=args.x, ys=args.y, group=args.group,
                   logx=args.logx, title=args.title)
    print(f"wrote {args.out}")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lcsearch",
                                 description="graph + compact-code similarity search")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=None,
                    help="cap numba threads (BLAS threads follow the environment)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic vectors")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--clusters", type=int, default=1000)
    p.add_argument("--manifold-dim", type=int, default=0,
                   help="generate low-intrinsic-dimension data instead of a mixture")
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gt", help="exact ground truth by brute force")
    p.add_argument("--base", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gt)

    p = sub.add_parser("train-codec", help="train a codec from a spec string")
    p.add_argument("--spec", required=True, help="e.g. PQ1x16+OPQ30x8")
    p.add_argument("--learn", required=True)
    p.add_argument("--opq-iters", type=int, default=20)
    p.add_argument("--kmeans-iters", type=int, default=25)
    p.add_argument("--coarse-exact", action="store_true",
                   help="train large coarse codebooks with plain k-means")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("codec-eval", help="exhaustive-search codec accuracy table")
    _add_dataset_flags(p)
    p.add_argument("--specs", nargs="+", required=True)
    p.add_argument("--opq-iters", type=int, default=20)
    p.add_argument("--kmeans-iters", type=int, default=25)
    p.add_argument("--coarse-exact", action="store_true")
    p.add_argument("--out", default="codec_eval.csv")
    p.set_defaults(func=cmd_codec_eval)

    p = sub.add_parser("build-index", help="build a graph+codes index")
    _add_dataset_flags(p, queries=False)
    p.add_argument("--config", required=True, help="e.g. 'L6&OPQ32,M=8'")
    p.add_argument("--efC", type=int, default=200, help="construction beam width")
    p.add_argument("--refine", type=int, default=10, help="re-rank shortlist size")
    p.add_argument("--sample", type=int, default=250_000)
    p.add_argument("--iters", type=int, default=10, help="regression EM iterations")
    p.add_argument("--coarse-exact", action="store_true")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("train-regression", help="retrain an index's regression codebook")
    p.add_argument("--index", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--M", type=int, default=8)
    p.add_argument("--B", type=int, default=256)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--sample", type=int, default=250_000)
    p.add_argument("--out", help="defaults to overwriting --index")
    p.set_defaults(func=cmd_train_regression)

    p = sub.add_parser("search", help="query an index")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--T", type=int, default=16384)
    p.add_argument("--ef", type=int, default=None)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--out", default="search.csv")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("estimators", help="per-estimator reconstruction error quantiles")
    _add_dataset_flags(p, queries=False)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--centroids", type=int, default=16384)
    p.add_argument("--out", default="estimators.csv")
    p.set_defaults(func=cmd_estimators)

    p = sub.add_parser("tradeoff-sweep", help="memory split sweep under a byte budget")
    _add_dataset_flags(p)
    p.add_argument("--budget", type=int, default=64)
    p.add_argument("--entries", nargs="+", required=True,
                   help="links:code_bytes:M (append :r to re-rank when M=0)")
    p.add_argument("--T", type=int, nargs="+", default=[1024, 16384])
    p.add_argument("--efC", type=int, default=200)
    p.add_argument("--sample", type=int, default=250_000)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--opq-iters", type=int, default=20)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", default="tradeoff.csv")
    p.set_defaults(func=cmd_tradeoff_sweep)

    p = sub.add_parser("speed-recall", help="timing/recall curves per method")
    _add_dataset_flags(p)
    p.add_argument("--index", help="LC index file")
    p.add_argument("--imi", help="IMI index file")
    p.add_argument("--T", type=int, nargs="+",
                   default=[64, 256, 1024, 4096, 16384])
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--out", default="speed_recall.csv")
    p.set_defaults(func=cmd_speed_recall)

    p = sub.add_parser("imi-build", help="build the inverted multi-index baseline")
    _add_dataset_flags(p, queries=False)
    p.add_argument("--K", type=int, default=1024)
    p.add_argument("--fine", default="OPQ32x8", help="fine codec spec or 'none'")
    p.add_argument("--kmeans-iters", type=int, default=25)
    p.add_argument("--opq-iters", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_imi_build)

    p = sub.add_parser("imi-search", help="query the IMI baseline")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--T", type=int, default=16384)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--out", default="imi_search.csv")
    p.set_defaults(func=cmd_imi_search)

    p = sub.add_parser("plot", help="SVG line chart from a harness CSV")
    p.add_argument("csv")
    p.add_argument("--x", required=True)
    p.add_argument("--y", nargs="+", required=True)
    p.add_argument("--group", default=None)
    p.add_argument("--logx", action="store_true")
    p.add_argument("--title", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    args = ap.parse_args(argv)
    if args.threads is not None:
        import numba
        numba.set_num_threads(max(1, args.threads))
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
