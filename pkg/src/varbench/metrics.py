"""Evaluation measures for attacks, category push and recommendation quality."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .dataio import SplitDataset


@dataclass(frozen=True)
class CategorySet:
    """Items whose clean image the IFE assigns to class ``cls``."""

    cls: int
    items: frozenset

    @classmethod
    def from_predictions(cls, item_ids, predicted, c: int) -> CategorySet:
        item_ids = np.asarray(item_ids)
        return cls(int(c), frozenset(int(i) for i in item_ids[np.asarray(predicted) == c]))

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, item) -> bool:
        return int(item) in self.items


@dataclass(frozen=True)
class RelevanceConfig:
    tau: float = 1.0
    s_max: float = 1.0

    def __post_init__(self):
        if self.s_max < self.tau:
            raise ValueError(f"s_max ({self.s_max}) must be >= tau ({self.tau})")

    @property
    def ideal_rel(self) -> float:
        return 2.0 ** (self.s_max - self.tau + 1.0) - 1.0


@dataclass
class MetricResult:
    per_user: dict
    mean: float


def _items(lst) -> np.ndarray:
    # RankingList or a bare sequence of ids
    return np.asarray(getattr(lst, "items", lst), dtype=np.int64)


def _discounts(K: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, K + 2))


def _check(lists: Mapping, K: int) -> None:
    if not lists:
        raise ValueError("no users to evaluate")
    if K < 1:
        raise ValueError("K must be >= 1")


def _hits(lists: Mapping, cat: CategorySet, K: int) -> dict:
    return {u: np.array([int(i) in cat.items for i in _items(l)[:K]], dtype=bool) for u, l in lists.items()}


def chr_at_k(lists: Mapping, cat: CategorySet, K: int) -> MetricResult:
    """Share of the top-K slots holding category items; short lists count missing slots as misses."""
    _check(lists, K)
    per = {u: h.sum() / K for u, h in _hits(lists, cat, K).items()}
    return MetricResult(per, float(np.mean(list(per.values()))))


def ncdcg_at_k(lists: Mapping, cat: CategorySet, K: int, rc: RelevanceConfig = RelevanceConfig()) -> MetricResult:
    _check(lists, K)
    if len(cat) == 0:
        raise ValueError(f"category {cat.cls} is empty")
    disc = _discounts(K)
    icdcg = rc.ideal_rel * disc[: min(K, len(cat))].sum()
    if icdcg <= 0:
        raise ValueError("ideal CDCG is zero")
    per = {}
    for u, h in _hits(lists, cat, K).items():
        per[u] = rc.ideal_rel * disc[: len(h)][h].sum() / icdcg
    return MetricResult(per, float(np.mean(list(per.values()))))


def accuracy_metrics(lists: Mapping, split: SplitDataset, K: int) -> dict[str, float]:
    """Recall@K and nDCG@K with the single held-out item per user."""
    _check(lists, K)
    recall, ndcg = [], []
    for u, t in zip(split.test.users, split.test.items):
        if int(u) not in lists:
            raise KeyError(f"user {int(u)} has no ranking list")
        top = _items(lists[int(u)])[:K]
        pos = np.flatnonzero(top == int(t))
        recall.append(1.0 if len(pos) else 0.0)
        ndcg.append(1.0 / np.log2(pos[0] + 2.0) if len(pos) else 0.0)
    return {"Recall": float(np.mean(recall)), "nDCG": float(np.mean(ndcg))}


def gini(freq) -> float:
    """Gini index of a non-negative frequency vector; 0 for uniform or all-zero input."""
    x = np.sort(np.asarray(freq, dtype=np.float64))
    n, total = len(x), x.sum()
    if n == 0 or total == 0:
        return 0.0
    i = np.arange(1, n + 1)
    return float(((2 * i - n - 1) * x).sum() / (n * total))


def beyond_accuracy(lists: Mapping, split: SplitDataset, K: int, catalog=None) -> dict[str, float]:
    """ICov, Gini over the catalog's recommendation frequencies, and EFD.

    EFD uses p(i) = max(train count of i, 1) / number of train users.
    """
    _check(lists, K)
    catalog = split.train.item_ids if catalog is None else np.asarray(catalog)
    tops = [_items(l)[:K] for l in lists.values()]
    rec = np.concatenate(tops) if tops else np.zeros(0, dtype=np.int64)
    pos = {int(i): k for k, i in enumerate(catalog)}
    freq = np.zeros(len(catalog))
    np.add.at(freq, [pos[int(i)] for i in rec], 1.0)

    train_items, counts = np.unique(split.train.items, return_counts=True)
    pop = dict(zip(train_items.tolist(), counts.tolist()))
    n_users = len(np.unique(split.train.users))
    efd = []
    for top in tops:
        p = np.array([max(pop.get(int(i), 0), 1) for i in top], dtype=np.float64) / n_users
        efd.append(float((-np.log2(p)).sum() / K))
    return {"ICov": float(len(np.unique(rec))), "Gini": gini(freq), "EFD": float(np.mean(efd))}


def success_rate(achieved, target: int) -> float:
    """Fraction of attacked images whose predicted class is ``target``."""
    a = np.asarray(getattr(achieved, "achieved", achieved))
    if a.size == 0:
        raise ValueError("no attacked images")
    return float((a == target).mean())


def feature_loss(before, after, items=None) -> float:
    """Mean over items of (1/gamma) * ||phi_before - phi_after||^2."""
    if before.gamma != after.gamma:
        raise ValueError(f"feature dimension mismatch: {before.gamma} vs {after.gamma}")
    items = before.item_ids if items is None else items
    d = before.matrix(items) - after.matrix(items)
    if len(d) == 0:
        return 0.0
    return float((d ** 2).sum(axis=1).mean() / before.gamma)
