"""Top-K recommendation, NDCG@K and popularity-group exposure."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .data import InteractionMatrix, PopularityVector, popularity
from .exceptions import InsufficientDataError
from .model import EmbeddingPair

_log = logging.getLogger(__name__)


@dataclass
class Recommendations:
    """Ranked item lists; row u holds user u's items, padded with -1 when short."""

    items: np.ndarray
    short_users: np.ndarray

    def __len__(self):
        return self.items.shape[0]

    def lists(self):
        return [row[row >= 0] for row in self.items]


def topk_from_scores(scores: np.ndarray, K: int, mask: np.ndarray | None = None) -> np.ndarray:
    """Top-K item indices per row; masked entries excluded, ties go to the smaller index."""
    scores = np.asarray(scores, dtype=np.float64)
    if mask is not None:
        scores = np.where(mask, -np.inf, scores)
    # a stable sort on -score keeps equal scores in index order
    order = np.argsort(-scores, axis=1, kind="stable")[:, :K]
    if mask is not None:
        taken = np.take_along_axis(mask, order, axis=1)
        order = np.where(taken, -1, order)
    return order


def topk_recommend(E: EmbeddingPair, Y_train: InteractionMatrix, K: int, block: int = 2_000_000) -> Recommendations:
    if K < 1 or K > E.m:
        raise ValueError(f"K must be in [1, m={E.m}], got {K}")
    if Y_train.shape != (E.n, E.m):
        raise ValueError("training matrix shape does not match the embeddings")
    rows = max(1, block // E.m)
    out = np.empty((E.n, K), dtype=np.int64)
    for lo in range(0, E.n, rows):
        hi = min(E.n, lo + rows)
        mask = Y_train.csr[lo:hi].toarray().astype(bool)
        out[lo:hi] = topk_from_scores(E.U[lo:hi] @ E.V.T, K, mask)
    short = np.flatnonzero((out < 0).any(axis=1))
    if short.size:
        _log.warning("%d users have fewer than %d unseen items", short.size, K)
    return Recommendations(out, short)


def _as_items(recommendations):
    if isinstance(recommendations, Recommendations):
        return recommendations.items
    return recommendations


def ndcg_at_k(recommendations, test: InteractionMatrix, K: int) -> tuple[float, int]:
    """Mean NDCG@K over users with at least one test item, and that user count."""
    if K < 1:
        raise ValueError("K must be >= 1")
    items = _as_items(recommendations)
    n = len(items)
    discounts = 1.0 / np.log2(np.arange(2, K + 2))
    ideal = np.cumsum(discounts)
    total, users = 0.0, 0
    for u in range(min(n, test.n)):
        truth = test.items_of(u)
        if truth.size == 0:
            continue
        ranked = np.asarray(items[u][:K])
        ranked = ranked[ranked >= 0]
        hits = np.isin(ranked, truth)
        dcg = float(discounts[: ranked.size][hits].sum())
        total += dcg / ideal[min(K, truth.size) - 1]
        users += 1
    if users == 0:
        raise InsufficientDataError("no user has a test interaction")
    return total / users, users


def group_by_popularity(r, G: int = 5) -> np.ndarray:
    """Group id per item: group 0 holds the most popular items, each group ~1/G of the mass."""
    vals = np.asarray(r.values if isinstance(r, PopularityVector) else r, dtype=np.float64)
    if G < 2:
        raise ValueError("G must be >= 2")
    if np.count_nonzero(vals) < G:
        raise InsufficientDataError(f"need at least {G} items with nonzero popularity")
    total = vals.sum()
    target = total / G
    order = np.argsort(-vals, kind="stable")
    groups = np.empty(vals.size, dtype=np.int64)
    g, mass = 0, 0.0
    for item in order:
        groups[item] = g
        mass += vals[item]
        if g < G - 1 and mass >= target:
            g, mass = g + 1, 0.0
    return groups


def popular_ratio_topk(recommendations, groups: np.ndarray, G: int | None = None) -> tuple[float, np.ndarray]:
    items = np.asarray(_as_items(recommendations))
    flat = items[items >= 0]
    G = int(G if G is not None else groups.max() + 1)
    counts = np.bincount(groups[flat], minlength=G).astype(np.float64)
    if not counts.sum():
        raise InsufficientDataError("no recommendation slots to count")
    shares = counts / counts.sum()
    return float(shares[0]), shares


@dataclass
class EvalReport:
    ndcg_at_k: float
    k: int
    popular_ratio: float
    group_shares: list
    users_evaluated: int

    def to_dict(self):
        return asdict(self)


def evaluate(
    E: EmbeddingPair,
    Y_train: InteractionMatrix,
    test: InteractionMatrix,
    *,
    K: int = 20,
    G: int = 5,
    groups: np.ndarray | None = None,
) -> EvalReport:
    """NDCG@K on ``test`` and exposure shares of training-popularity groups."""
    recs = topk_recommend(E, Y_train, K)
    ndcg, users = ndcg_at_k(recs, test, K)
    if groups is None:
        groups = group_by_popularity(popularity(Y_train), G)
    pop, shares = popular_ratio_topk(recs, groups, G)
    return EvalReport(float(ndcg), K, pop, [float(s) for s in shares], users)
