"""Behavior-based recommendation over a trained clustering.

The pipeline for one active customer:

1. assign it to a cluster (largest category share for CBC, nearest centroid
   of correlation rows for the baselines),
2. keep co-cluster customers whose record count reaches the midpoint between
   the cluster maximum and the active customer's own count,
3. score them by Jaccard similarity over distinct (product, behavior) pairs
   and keep those at or above the mean similarity,
4. rank unseen products by similarity-weighted event counts.

Similarity and the mean threshold are compared as exact fractions so that the
``>=`` boundary never depends on float rounding.
"""

from __future__ import annotations

import json
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterator

import numpy as np

from .clustering import CBC, Clustering, cluster_centroids
from .correlation import EmptyProfileError, correlation_matrix
from .data_model import BehaviorRecord, BehaviorType, Dataset

__all__ = [
    "ColdCategoryError",
    "EmptyNeighborhoodError",
    "UndefinedSimilarityError",
    "BehaviorProfile",
    "ProfileStore",
    "Neighborhood",
    "SimilarSet",
    "RecommendationList",
    "BehaviorRecommender",
    "assign_active",
    "delta_threshold",
    "neighborhood",
    "behavior_similarity",
    "similarity_threshold",
    "similar_set",
    "reputation",
    "recommend_top_k",
]


class ColdCategoryError(ValueError):
    """The active profile touches no category the trained clustering knows."""


class EmptyNeighborhoodError(ValueError):
    pass


class UndefinedSimilarityError(ValueError):
    pass


@dataclass(frozen=True)
class BehaviorProfile:
    customer_id: int
    events: Mapping[tuple[int, BehaviorType], int]
    category_counts: Mapping[int, int]

    @classmethod
    def from_records(
        cls, customer_id: int, records: Iterable[BehaviorRecord]
    ) -> BehaviorProfile:
        events: Counter = Counter()
        cats: Counter = Counter()
        for r in records:
            events[(r.product_id, BehaviorType(r.behavior))] += 1
            cats[r.category_id] += 1
        return cls(customer_id, dict(events), dict(cats))

    @cached_property
    def behavior_length(self) -> int:
        return sum(self.events.values())

    @cached_property
    def pairs(self) -> frozenset[tuple[int, BehaviorType]]:
        return frozenset(self.events)

    @cached_property
    def product_counts(self) -> dict[int, int]:
        out: Counter = Counter()
        for (p, _), n in self.events.items():
            out[p] += n
        return dict(out)

    def __bool__(self) -> bool:
        return bool(self.events)


class ProfileStore(Mapping):
    """Lazily built profiles for every customer of a dataset."""

    def __init__(self, d: Dataset):
        self._d = d
        self._cache: dict[int, BehaviorProfile] = {}

    def __getitem__(self, customer: int) -> BehaviorProfile:
        prof = self._cache.get(customer)
        if prof is None:
            if customer not in self._d.customer_index:
                raise KeyError(customer)
            pos = self._d.customer_index[customer]
            events = Counter(
                zip(self._d.products[pos].tolist(),
                    map(BehaviorType, self._d.behaviors[pos].tolist()))
            )
            cats = Counter(self._d.categories[pos].tolist())
            prof = BehaviorProfile(customer, dict(events), dict(cats))
            self._cache[customer] = prof
        return prof

    def __iter__(self) -> Iterator[int]:
        return iter(self._d.customer_index)

    def __len__(self) -> int:
        return len(self._d.customer_index)


@dataclass(frozen=True)
class Neighborhood:
    active: int
    cluster_label: int
    members: frozenset[int]
    delta: int


@dataclass(frozen=True)
class SimilarSet:
    active: int
    entries: tuple[tuple[int, float], ...]
    theta: float
    exact: Mapping[int, Fraction] = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class RecommendationList:
    active: int
    items: tuple[tuple[int, float], ...]
    k: int
    cluster_label: int | None = None
    degraded: bool = False

    @property
    def products(self) -> list[int]:
        return [p for p, _ in self.items]

    def to_json(self) -> str:
        return json.dumps(
            {
                "customer_id": self.active,
                "cluster_label": self.cluster_label,
                "degraded": self.degraded,
                "items": [{"product_id": p, "score": s} for p, s in self.items],
            }
        )


# ---------------------------------------------------------------------------
# Pipeline steps
# ---------------------------------------------------------------------------


def _argmax_lowest(scores: Mapping[int, float]) -> int:
    best = max(scores.values())
    return min(k for k, v in scores.items() if v == best)


def assign_active(
    clustering: Clustering,
    profile: BehaviorProfile,
    centroids: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> int:
    """Cluster label for an active customer.

    For CBC the label is the category with the largest correlation among the
    clustering's labels.  Other methods need ``centroids`` as
    ``(labels, centroid matrix, category ids)`` and pick the nearest centroid.
    """
    if not profile:
        raise EmptyProfileError(f"customer {profile.customer_id} has no behaviors")
    cb = profile.behavior_length
    if clustering.method == CBC:
        known = clustering.members
        corr = {c: n / cb for c, n in profile.category_counts.items() if c in known}
        if not corr:
            raise ColdCategoryError(
                f"customer {profile.customer_id}: no category matches a trained cluster"
            )
        return _argmax_lowest(corr)
    if centroids is None:
        raise ValueError(f"{clustering.method} clustering needs centroids to place customers")
    labels, C, categories = centroids
    row = np.zeros(len(categories))
    hit = False
    for c, n in profile.category_counts.items():
        j = int(np.searchsorted(categories, c))
        if j < len(categories) and categories[j] == c:
            row[j] = n / cb
            hit = True
    if not hit:
        raise ColdCategoryError(
            f"customer {profile.customer_id}: no category seen during training"
        )
    dist = np.sum((C - row) ** 2, axis=1)
    return int(labels[int(np.argmin(dist))])


def delta_threshold(max_cb: int, active_cb: int) -> int:
    """Minimum record count for joining the neighborhood (midpoint, rounded down)."""
    if max_cb < 1 or active_cb < 1:
        raise ValueError("behavior counts must be >= 1")
    return (max_cb + active_cb) // 2


def neighborhood(
    clustering: Clustering, d: Dataset, active: BehaviorProfile, label: int
) -> Neighborhood:
    if label not in clustering.members:
        raise KeyError(f"unknown cluster label {label}")
    delta = delta_threshold(clustering.max_cb[label], active.behavior_length)
    members = frozenset(
        c
        for c in clustering.members[label]
        if c != active.customer_id and d.record_count(c) >= delta
    )
    return Neighborhood(active.customer_id, label, members, delta)


def _jaccard(a: BehaviorProfile, b: BehaviorProfile) -> Fraction:
    union = len(a.pairs | b.pairs)
    if union == 0:
        raise UndefinedSimilarityError("similarity of two empty profiles is undefined")
    return Fraction(len(a.pairs & b.pairs), union)


def behavior_similarity(a: BehaviorProfile, b: BehaviorProfile) -> float:
    """Jaccard index of the two customers' distinct (product, behavior) pairs."""
    s = _jaccard(a, b)
    return s.numerator / s.denominator


def _exact_mean(values: Sequence) -> Fraction:
    if not values:
        raise EmptyNeighborhoodError("no similarities to average")
    return sum(map(Fraction, values), Fraction(0)) / len(values)


def similarity_threshold(sims: Sequence[float]) -> float:
    return float(_exact_mean(sims))


def similar_set(
    n: Neighborhood, active: BehaviorProfile, profiles: Mapping[int, BehaviorProfile]
) -> SimilarSet:
    """Neighbors whose similarity is at least the neighborhood mean.

    An empty neighborhood yields an empty set with ``theta`` NaN.
    """
    if not n.members:
        return SimilarSet(active.customer_id, (), float("nan"))
    order = sorted(n.members)
    exact = {c: _jaccard(active, profiles[c]) for c in order}
    theta = _exact_mean(list(exact.values()))
    kept = {c: s for c, s in exact.items() if s >= theta}
    entries = tuple((c, s.numerator / s.denominator) for c, s in kept.items())
    return SimilarSet(active.customer_id, entries, float(theta), kept)


def reputation(
    active: BehaviorProfile,
    s: SimilarSet,
    profiles: Mapping[int, BehaviorProfile],
    product: int,
) -> float:
    """Similarity-weighted event count of ``product`` over the similar set."""
    total = 0.0
    for cust, sim in s.entries:
        total += profiles[cust].product_counts.get(product, 0) * sim
    return total


def _reputations(s: SimilarSet, profiles: Mapping[int, BehaviorProfile]) -> dict[int, float]:
    scores: dict[int, float] = {}
    for cust, sim in s.entries:
        for p, cnt in profiles[cust].product_counts.items():
            scores[p] = scores.get(p, 0.0) + cnt * sim
    return scores


def _top_k(scores: Mapping[int, float], k: int, exclude: Iterable[int] = ()) -> tuple:
    skip = set(exclude)
    ranked = sorted(
        ((p, v) for p, v in scores.items() if v > 0 and p not in skip),
        key=lambda pv: (-pv[1], pv[0]),
    )
    return tuple(ranked[:k])


# ---------------------------------------------------------------------------
# Trained state
# ---------------------------------------------------------------------------


class BehaviorRecommender:
    """Immutable trained state: training data, its clustering and profiles.

    Safe to share between threads; the profile cache only ever gains
    identical entries.
    """

    def __init__(self, train: Dataset, clustering: Clustering):
        self.dataset = train
        self.clustering = clustering
        self.profiles = ProfileStore(train)
        self.centroids = None
        if clustering.method != CBC:
            m = correlation_matrix(train)
            labels, C = cluster_centroids(clustering, m)
            self.centroids = (labels, C, m.categories)
        self._popular: dict[int | None, dict[int, float]] = {}

    def assign(self, profile: BehaviorProfile) -> int:
        return assign_active(self.clustering, profile, self.centroids)

    def popularity(self, label: int | None) -> dict[int, float]:
        """Event count per product inside one cluster, or overall for ``None``."""
        pop = self._popular.get(label)
        if pop is None:
            d = self.dataset
            if label is None:
                mask = np.ones(len(d), dtype=bool)
            else:
                members = np.fromiter(self.clustering.members[label], dtype=np.int64)
                mask = np.isin(d.customers, members)
            prods, counts = np.unique(d.products[mask], return_counts=True)
            pop = dict(zip(prods.tolist(), map(float, counts.tolist())))
            self._popular[label] = pop
        return pop

    def recommend(
        self, active: BehaviorProfile, k: int, *, include_seen: bool = False
    ) -> RecommendationList:
        return recommend_top_k(active, self, k, include_seen=include_seen)

    def recommend_many(
        self,
        actives: Sequence[BehaviorProfile],
        k: int,
        *,
        include_seen: bool = False,
        threads: int = 1,
    ) -> list[RecommendationList]:
        if threads <= 1 or len(actives) < 2:
            return [self.recommend(a, k, include_seen=include_seen) for a in actives]
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda a: self.recommend(a, k, include_seen=include_seen),
                                 actives))


def recommend_top_k(
    active: BehaviorProfile,
    model: BehaviorRecommender,
    k: int,
    *,
    include_seen: bool = False,
) -> RecommendationList:
    """Top-``k`` products by reputation for one active customer.

    Products the customer already touched are left out unless
    ``include_seen``.  When no neighbor with positive similarity survives,
    the cluster's most frequent products are returned instead and the list
    is marked ``degraded``; a customer whose categories are all unknown gets
    the overall most frequent products.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    seen = () if include_seen else active.product_counts.keys()
    try:
        label = model.assign(active)
    except ColdCategoryError:
        items = _top_k(model.popularity(None), k, seen)
        return RecommendationList(active.customer_id, items, k, None, True)

    hood = neighborhood(model.clustering, model.dataset, active, label)
    sims = similar_set(hood, active, model.profiles)
    if not any(v > 0 for _, v in sims.entries):
        items = _top_k(model.popularity(label), k, seen)
        return RecommendationList(active.customer_id, items, k, label, True)
    items = _top_k(_reputations(sims, model.profiles), k, seen)
    return RecommendationList(active.customer_id, items, k, label, False)
