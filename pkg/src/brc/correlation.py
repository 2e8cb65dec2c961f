"""Customer-category cooperation counts and correlation ratios.

``cooperation`` is how many of a customer's records fall on products of a
category; ``correlation`` divides that by the customer's total record count.
All behavior types count equally unless a weight mapping is supplied.
"""

from __future__ import annotations

import csv
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data_model import BehaviorType, Dataset

__all__ = [
    "UnknownCustomerError",
    "EmptyProfileError",
    "CorrelationMatrix",
    "cooperation",
    "correlation",
    "correlation_matrix",
]


class UnknownCustomerError(KeyError):
    pass


class EmptyProfileError(ValueError):
    """A customer with no behaviors has no defined correlation."""


def _weight_vector(weights: Mapping[BehaviorType, float] | None) -> np.ndarray | None:
    if weights is None:
        return None
    w = np.ones(len(BehaviorType))
    for b, v in weights.items():
        if v < 0:
            raise ValueError("behavior weights must be non-negative")
        w[BehaviorType(b)] = v
    return w


def _customer_positions(d: Dataset, customer: int) -> np.ndarray:
    try:
        return d.customer_index[customer]
    except KeyError:
        raise UnknownCustomerError(customer) from None


def cooperation(
    d: Dataset,
    customer: int,
    category: int,
    weights: Mapping[BehaviorType, float] | None = None,
):
    """Number of the customer's records on products of ``category``.

    With ``weights`` the count becomes a weighted sum over behavior types.
    """
    pos = _customer_positions(d, customer)
    hit = d.categories[pos] == category
    w = _weight_vector(weights)
    if w is None:
        return int(np.count_nonzero(hit))
    return float(w[d.behaviors[pos][hit]].sum())


def correlation(
    d: Dataset,
    customer: int,
    category: int,
    weights: Mapping[BehaviorType, float] | None = None,
) -> float:
    pos = _customer_positions(d, customer)
    w = _weight_vector(weights)
    total = len(pos) if w is None else float(w[d.behaviors[pos]].sum())
    if total == 0:
        raise EmptyProfileError(f"customer {customer} has no behaviors")
    return cooperation(d, customer, category, weights) / total


@dataclass(frozen=True)
class CorrelationMatrix:
    """Sparse customer x category matrix of correlation ratios.

    ``customers`` and ``categories`` are sorted id arrays labelling rows and
    columns.  ``counts`` holds the raw cooperation counts and ``totals`` the
    per-customer denominators.
    """

    customers: np.ndarray
    categories: np.ndarray
    counts: sp.csr_matrix
    totals: np.ndarray
    values: sp.csr_matrix

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def row_of(self, customer: int) -> int:
        i = int(np.searchsorted(self.customers, customer))
        if i >= len(self.customers) or self.customers[i] != customer:
            raise UnknownCustomerError(customer)
        return i

    def column_of(self, category: int) -> int:
        j = int(np.searchsorted(self.categories, category))
        if j >= len(self.categories) or self.categories[j] != category:
            raise KeyError(category)
        return j

    def value(self, customer: int, category: int) -> float:
        i = self.row_of(customer)
        try:
            j = self.column_of(category)
        except KeyError:
            return 0.0
        return float(self.values[i, j])

    def row(self, customer: int) -> np.ndarray:
        return self.values[self.row_of(customer)].toarray().ravel()

    def dense(self) -> np.ndarray:
        return self.values.toarray()

    def triplets(self):
        """Yield ``(customer_id, category_id, value)`` for every non-zero cell."""
        coo = self.values.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            yield int(self.customers[r]), int(self.categories[c]), float(v)

    def write_triplets(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["customer_id", "category_id", "value"])
            for cust, cat, v in self.triplets():
                w.writerow([cust, cat, repr(v)])


def correlation_matrix(
    d: Dataset, weights: Mapping[BehaviorType, float] | None = None
) -> CorrelationMatrix:
    customers = d.customer_ids()
    categories = d.category_ids()
    n, m = len(customers), len(categories)
    rows = np.searchsorted(customers, d.customers)
    cols = np.searchsorted(categories, d.categories)
    w = _weight_vector(weights)
    data = np.ones(len(rows), dtype=np.int64) if w is None else w[d.behaviors]
    counts = sp.csr_matrix((data, (rows, cols)), shape=(n, m))
    counts.sum_duplicates()
    counts.sort_indices()
    if w is None:
        totals = np.bincount(rows, minlength=n).astype(np.int64)
    else:
        totals = np.bincount(rows, weights=data, minlength=n)
    if n and np.any(totals == 0):
        bad = int(customers[np.flatnonzero(totals == 0)[0]])
        raise EmptyProfileError(f"customer {bad} has no weighted behaviors")
    # per-cell division keeps each value bit-identical to count / total
    row_of_nz = np.repeat(np.arange(n), np.diff(counts.indptr))
    vals = counts.data / totals[row_of_nz] if n else np.zeros(0)
    values = sp.csr_matrix((vals.astype(np.float64), counts.indices.copy(), counts.indptr.copy()),
                           shape=(n, m))
    return CorrelationMatrix(customers, categories, counts, totals, values)
