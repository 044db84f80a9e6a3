"""Full-ranking top-K evaluation with head/tail item strata."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo

__all__ = [
    "RankingReport",
    "evaluate_rankings",
    "head_tail_partition",
    "ndcg_at_k",
    "pairwise_distance",
    "rank_items",
    "recall_at_k",
    "top_k_items",
]

STRATA = ("all", "H20", "T80")


def recall_at_k(ranked, relevant, k: int) -> float:
    """Fraction of ``relevant`` found in the first ``k`` of ``ranked``; NaN if nothing is relevant."""
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return math.nan
    return len(relevant.intersection(list(ranked)[:k])) / len(relevant)


def ndcg_at_k(ranked, relevant, k: int) -> float:
    """Binary-relevance NDCG with gain ``1 / log2(rank + 1)``; NaN if nothing is relevant."""
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return math.nan
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(list(ranked)[:k]) if item in relevant)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(len(relevant), k)))
    return dcg / idcg


def head_tail_partition(item_degrees) -> tuple[np.ndarray, np.ndarray]:
    """Split items into the top 20% by degree (H20) and the rest (T80).

    Ties are broken by ascending item index.
    """
    deg = np.asarray(item_degrees)
    order = np.lexsort((np.arange(len(deg)), -deg))
    n_head = math.ceil(0.2 * len(deg))
    return np.sort(order[:n_head]), np.sort(order[n_head:])


def pairwise_distance(x: np.ndarray, y: np.ndarray, k: float = 1.0) -> np.ndarray:
    """Poincare distances between every row of ``x`` and every row of ``y``."""
    sx = np.sum(x * x, axis=1)
    sy = np.sum(y * y, axis=1)
    q = np.maximum(sx[:, None] + sy[None, :] - 2.0 * (x @ y.T), 0.0)
    z = 2.0 * k * q / ((k - sx)[:, None] * (k - sy)[None, :])
    return np.sqrt(k) * geo.arcosh1p(z)


def rank_items(user_emb, item_emb, exclude=(), k: float = 1.0) -> np.ndarray:
    """All items except ``exclude``, best first; ties go to the lower index."""
    h_u = geo.exp_o_kernel(np.atleast_2d(np.asarray(user_emb, float)), k)
    h_i = geo.exp_o_kernel(np.asarray(item_emb, float), k)
    d = pairwise_distance(h_u, h_i, k)[0]
    order = np.argsort(d, kind="stable")
    if len(exclude):
        order = order[~np.isin(order, np.asarray(exclude))]
    return order


def top_k_items(user_emb, item_emb, exclude_lists, k_max: int, k: float = 1.0, chunk: int = 1024) -> np.ndarray:
    """Top ``k_max`` items per user row, excluding each user's ``exclude_lists`` entry.

    Rows beyond the number of available items are padded with -1.
    """
    h_u = geo.exp_o_kernel(np.asarray(user_emb, float), k)
    h_i = geo.exp_o_kernel(np.asarray(item_emb, float), k)
    n_items = len(h_i)
    out = np.full((len(h_u), k_max), -1, dtype=np.int64)
    for start in range(0, len(h_u), chunk):
        d = pairwise_distance(h_u[start:start + chunk], h_i, k)
        for row, excl in enumerate(exclude_lists[start:start + chunk]):
            if len(excl):
                d[row, excl] = np.inf
        order = np.argsort(d, axis=1, kind="stable")
        for row, excl in enumerate(exclude_lists[start:start + chunk]):
            avail = min(k_max, n_items - len(excl))
            out[start + row, :avail] = order[row, :avail]
    return out


@dataclass
class RankingReport:
    """Mean Recall@K / NDCG@K per stratum plus the per-user values.

    ``values[(metric, K, stratum)]`` is the mean over users with at least
    one relevant item in that stratum; ``per_user`` holds the same keys
    mapping to arrays with NaN for excluded users.
    """

    ks: tuple
    values: dict = field(default_factory=dict)
    per_user: dict = field(default_factory=dict)
    n_users: dict = field(default_factory=dict)

    def get(self, metric: str, k: int, stratum: str = "all") -> float:
        return self.values[(metric, k, stratum)]

    def to_dict(self) -> dict:
        out = {f"{m}@{k}/{s}": v for (m, k, s), v in self.values.items()}
        out.update({f"n_users/{s}": n for s, n in self.n_users.items()})
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "K", "stratum", "value"])
        for (m, k, s), v in self.values.items():
            w.writerow([m, k, s, f"{v:.10g}"])
        return buf.getvalue()


def evaluate_rankings(topk: np.ndarray, relevant, ks=(10, 20), head=None, n_items=None) -> RankingReport:
    """Vectorised Recall@K and NDCG@K for precomputed top-K lists.

    Parameters
    ----------
    topk : int array (n_users, K_max)
        Ranked item indices, -1 padded.
    relevant : list of int arrays
        Relevant items per user.
    head : int array, optional
        H20 items; when given the report also has H20 / T80 strata.
    """
    ks = tuple(sorted(set(int(k) for k in ks)))
    if ks[0] < 1:
        raise ValueError("every K must be >= 1")
    k_max = ks[-1]
    if topk.shape[1] < k_max:
        raise ValueError(f"top-k lists have {topk.shape[1]} columns, need {k_max}")
    topk = topk[:, :k_max]
    n_users = len(topk)
    if n_items is None:
        n_items = int(max(topk.max(initial=-1), max((r.max(initial=-1) for r in relevant), default=-1))) + 1
    codes_rel = np.concatenate(
        [u * n_items + np.asarray(r, dtype=np.int64) for u, r in enumerate(relevant)] or [np.array([], np.int64)]
    )
    codes_rel.sort()
    codes_top = np.arange(n_users)[:, None] * n_items + topk
    if len(codes_rel):
        pos = np.minimum(np.searchsorted(codes_rel, codes_top), len(codes_rel) - 1)
        hits = (topk >= 0) & (codes_rel[pos] == codes_top)
    else:
        hits = np.zeros(topk.shape, dtype=bool)

    strata = {"all": (hits, np.array([len(r) for r in relevant]))}
    if head is not None:
        is_head = np.zeros(n_items, dtype=bool)
        is_head[np.asarray(head, dtype=np.int64)] = True
        top_head = np.where(topk >= 0, is_head[np.maximum(topk, 0)], False)
        n_head = np.array([int(is_head[np.asarray(r, dtype=np.int64)].sum()) for r in relevant])
        strata["H20"] = (hits & top_head, n_head)
        strata["T80"] = (hits & ~top_head, strata["all"][1] - n_head)

    # all sums run sequentially (rank order, then user order) so the result
    # does not depend on numpy's pairwise-summation blocking
    discount = np.array([1.0 / math.log2(r + 2) for r in range(k_max)])
    ideal = np.concatenate([[0.0], np.cumsum(discount)])
    report = RankingReport(ks)
    for s, (h, n_rel) in strata.items():
        valid = n_rel > 0
        report.n_users[s] = int(valid.sum())
        safe = np.where(valid, n_rel, 1)
        dcg = np.zeros(n_users)
        done = 0
        for k in ks:
            for r in range(done, k):
                dcg = dcg + h[:, r] * discount[r]
            done = k
            rec = np.where(valid, h[:, :k].sum(axis=1) / safe, np.nan)
            ndcg = np.where(valid, dcg / ideal[np.minimum(safe, k)], np.nan)
            for name, arr in (("recall", rec), ("ndcg", ndcg)):
                report.per_user[(name, k, s)] = arr
                report.values[(name, k, s)] = _sequential_mean(arr[valid])
    return report


def _sequential_mean(values: np.ndarray) -> float:
    if len(values) == 0:
        return math.nan
    return float(np.cumsum(values)[-1] / len(values))
