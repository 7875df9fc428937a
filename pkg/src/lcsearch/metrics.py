"""Evaluation metrics for approximate nearest-neighbor results.

recall@r is the fraction of queries whose true nearest neighbor appears among
the first r returned ids. Selectivity is reported as the mean number of
base-level distance evaluations per query.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import GroundTruth


@dataclass
class EvalMetrics:
    recall_at: dict[int, float]
    mean_distance_evals: float = 0.0
    wall_time_ms_per_query: float = 0.0
    # ranks exceeding the result-list length; their recall is a lower bound
    truncated_ranks: set[int] = field(default_factory=set)

    def __post_init__(self) -> None:
        ranks = sorted(self.recall_at)
        vals = [self.recall_at[r] for r in ranks]
        if any(v < 0.0 or v > 1.0 for v in vals):
            raise ValueError("recall values must lie in [0, 1]")
        if any(b < a - 1e-12 for a, b in zip(vals, vals[1:])):
            raise ValueError("recall_at must be non-decreasing in rank")


def recall_at(results: Sequence[np.ndarray] | np.ndarray, gt: GroundTruth,
              ranks: Sequence[int] = (1, 10, 100)) -> EvalMetrics:
    """Fraction of queries whose ground-truth top-1 id is in the top-r results.

    `results` is one ranked id array per query (or a 2-d array). Ranks longer
    than a result list are computed over what is there and flagged as
    truncated (a lower bound on the true recall).
    """
    n = gt.query_count
    if len(results) != n:
        raise ValueError(f"{len(results)} result lists for {n} ground-truth queries")
    target = gt.neighbors[:, 0]
    hits = {r: 0 for r in ranks}
    truncated: set[int] = set()
    for q in range(n):
        res = np.asarray(results[q]).ravel()
        for r in ranks:
            if r > res.size:
                truncated.add(r)
            if target[q] in res[:r]:
                hits[r] += 1
    return EvalMetrics(
        recall_at={r: hits[r] / n for r in ranks},
        truncated_ranks=truncated,
    )
