"""Category-based clustering plus k-means and fuzzy c-means baselines.

CBC labels every customer with the category holding the largest share of its
behaviors; ties go to the lowest category id.  The baselines cluster dense
correlation rows and label clusters ``0 .. k-1``.
"""

from __future__ import annotations

import csv
import os
from collections.abc import Callable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .correlation import CorrelationMatrix, EmptyProfileError
from .data_model import Dataset

__all__ = [
    "CBC",
    "KMEANS",
    "FCM",
    "METHODS",
    "Clustering",
    "cbc_assign",
    "form_clusters",
    "kmeans",
    "fcm",
    "cluster_centroids",
    "write_clustering",
    "read_clustering",
]

CBC = "CBC"
KMEANS = "KMEANS"
FCM = "FCM"
METHODS = (CBC, KMEANS, FCM)

IterationCallback = Callable[[int, np.ndarray, float], None]


@dataclass(frozen=True)
class Clustering:
    """Customer -> label assignment with its inverse and per-cluster max CB.

    ``memberships`` is only set by :func:`fcm` (rows follow sorted customer
    ids, columns follow labels).  ``history`` holds the objective value after
    each iteration for the iterative methods.
    """

    assignment: dict[int, int]
    members: dict[int, frozenset[int]]
    method: str
    max_cb: dict[int, int]
    memberships: np.ndarray | None = field(default=None, repr=False, compare=False)
    history: tuple[float, ...] = field(default=(), compare=False)

    @property
    def labels(self) -> list[int]:
        return sorted(self.members)

    def __len__(self) -> int:
        return len(self.members)

    def label_of(self, customer: int) -> int:
        return self.assignment[customer]


# ---------------------------------------------------------------------------
# CBC
# ---------------------------------------------------------------------------


def cbc_assign(m: CorrelationMatrix) -> dict[int, int]:
    """Label each customer with its highest-correlation category."""
    vals = m.values
    n = vals.shape[0]
    if n == 0:
        return {}
    nnz = np.diff(vals.indptr)
    if np.any(nnz == 0):
        bad = int(m.customers[np.flatnonzero(nnz == 0)[0]])
        raise EmptyProfileError(f"customer {bad} has an all-zero correlation row")
    sorted_vals = vals.sorted_indices() if not vals.has_sorted_indices else vals
    data = sorted_vals.data
    row_max = np.maximum.reduceat(data, sorted_vals.indptr[:-1])
    if np.any(row_max <= 0):
        bad = int(m.customers[np.flatnonzero(row_max <= 0)[0]])
        raise EmptyProfileError(f"customer {bad} has an all-zero correlation row")
    row_of_nz = np.repeat(np.arange(n), nnz)
    hits = np.flatnonzero(data == row_max[row_of_nz])
    # column indices are sorted within a row, so the first hit is the lowest id
    _, first = np.unique(row_of_nz[hits], return_index=True)
    cols = sorted_vals.indices[hits[first]]
    labels = m.categories[cols]
    return dict(zip(m.customers.tolist(), labels.tolist()))


def form_clusters(assignment: Mapping[int, int], d: Dataset, method: str = CBC) -> Clustering:
    """Group customers by label and cache each cluster's largest record count."""
    return _build(assignment, d.record_count, method)


def _build(
    assignment: Mapping[int, int],
    record_count: Callable[[int], int],
    method: str,
    memberships: np.ndarray | None = None,
    history: tuple[float, ...] = (),
) -> Clustering:
    groups: dict[int, set[int]] = {}
    for cust, label in assignment.items():
        groups.setdefault(label, set()).add(cust)
    members = {label: frozenset(groups[label]) for label in sorted(groups)}
    max_cb = {
        label: max(record_count(c) for c in custs) for label, custs in members.items()
    }
    return Clustering(
        dict(sorted(assignment.items())), members, method, max_cb, memberships, history
    )


def _matrix_counts(m: CorrelationMatrix) -> Callable[[int], int]:
    totals = dict(zip(m.customers.tolist(), m.totals.tolist()))
    return totals.__getitem__


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def _check_k(k: int, n: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of customers ({n})")


def _nearest(X: np.ndarray, C: np.ndarray, threads: int) -> tuple[np.ndarray, np.ndarray]:
    """Index of and squared distance to the nearest centroid, per row."""

    def block(lo_hi):
        lo, hi = lo_hi
        d2 = cdist(X[lo:hi], C, "sqeuclidean")
        idx = np.argmin(d2, axis=1)
        return idx, d2[np.arange(len(idx)), idx]

    n = len(X)
    if threads <= 1 or n < 2048:
        return block((0, n))
    step = -(-n // threads)
    spans = [(lo, min(lo + step, n)) for lo in range(0, n, step)]
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(block, spans))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _group_means(X: np.ndarray, labels: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(labels, kind="stable")
    sizes = np.bincount(labels, minlength=k)
    sums = np.zeros((k, X.shape[1]))
    present = np.flatnonzero(sizes)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])[present]
    sums[present] = np.add.reduceat(X[order], starts, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / sizes[:, None]
    return means, sizes


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = cdist(X, X[chosen], "sqeuclidean").ravel()
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, cdist(X, X[[nxt]], "sqeuclidean").ravel())
    return np.array(chosen)


def kmeans(
    m: CorrelationMatrix,
    k: int,
    seed: int = 0,
    *,
    init: str = "random",
    max_iter: int = 100,
    tol: float = 1e-6,
    threads: int = 1,
    on_iteration: IterationCallback | None = None,
) -> Clustering:
    """Lloyd's algorithm on the correlation rows.

    Stops when no assignment changes or no centroid moves more than ``tol``.
    An emptied cluster is reseeded with the point farthest from its own
    centroid.  ``on_iteration(i, labels, objective)`` fires after each
    centroid update.
    """
    X = m.dense()
    n = len(X)
    _check_k(k, n)
    rng = np.random.default_rng(seed)
    if init == "random":
        start = rng.choice(n, size=k, replace=False)
    elif init in ("k-means++", "kmeans++"):
        start = _kmeanspp(X, k, rng)
    else:
        raise ValueError(f"unknown init {init!r}")
    C = X[np.sort(start)].copy()

    labels = None
    history: list[float] = []
    for it in range(max_iter):
        new_labels, d2 = _nearest(X, C, threads)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        means, sizes = _group_means(X, labels, k)
        empty = np.flatnonzero(sizes == 0)
        if len(empty):
            far = np.argsort(-d2, kind="stable")
            taken: set[int] = set()
            for j, idx in zip(empty, (i for i in far if i not in taken)):
                means[j] = X[idx]
                taken.add(int(idx))
        shift = float(np.max(np.linalg.norm(means - C, axis=1)))
        C = means
        objective = float(np.sum((X - C[labels]) ** 2))
        history.append(objective)
        if on_iteration is not None:
            on_iteration(it, labels, objective)
        if shift < tol:
            break

    assignment = dict(zip(m.customers.tolist(), labels.tolist()))
    return _build(assignment, _matrix_counts(m), KMEANS, history=tuple(history))


def _fcm_memberships(D: np.ndarray, fuzzifier: float) -> np.ndarray:
    zero = D == 0
    out = np.empty_like(D)
    rows_zero = zero.any(axis=1)
    if rows_zero.any():
        z = zero[rows_zero].astype(float)
        out[rows_zero] = z / z.sum(axis=1, keepdims=True)
    rest = ~rows_zero
    if rest.any():
        inv = D[rest] ** (-2.0 / (fuzzifier - 1.0))
        out[rest] = inv / inv.sum(axis=1, keepdims=True)
    return out


def fcm(
    m: CorrelationMatrix,
    k: int,
    fuzzifier: float = 2.0,
    seed: int = 0,
    *,
    max_iter: int = 100,
    tol: float = 1e-6,
    threads: int = 1,
    on_iteration: IterationCallback | None = None,
) -> Clustering:
    """Fuzzy c-means; hard labels come from the largest membership degree.

    ``on_iteration(i, memberships, objective)`` fires after each membership
    update.
    """
    if fuzzifier <= 1:
        raise ValueError("fuzzifier must be > 1")
    X = m.dense()
    n = len(X)
    _check_k(k, n)
    rng = np.random.default_rng(seed)
    U = rng.random((n, k))
    U /= U.sum(axis=1, keepdims=True)

    def distances(C):
        if threads <= 1 or n < 2048:
            return cdist(X, C)
        step = -(-n // threads)
        with ThreadPoolExecutor(threads) as pool:
            parts = pool.map(lambda lo: cdist(X[lo : lo + step], C), range(0, n, step))
            return np.vstack(list(parts))

    history: list[float] = []
    for it in range(max_iter):
        W = U**fuzzifier
        C = (W.T @ X) / W.sum(axis=0)[:, None]
        D = distances(C)
        U_new = _fcm_memberships(D, fuzzifier)
        change = float(np.max(np.abs(U_new - U)))
        U = U_new
        objective = float(np.sum((U**fuzzifier) * D**2))
        history.append(objective)
        if on_iteration is not None:
            on_iteration(it, U, objective)
        if change < tol:
            break

    labels = np.argmax(U, axis=1)
    assignment = dict(zip(m.customers.tolist(), labels.tolist()))
    return _build(assignment, _matrix_counts(m), FCM, U, tuple(history))


def cluster_centroids(c: Clustering, m: CorrelationMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Mean correlation row per cluster as ``(labels, dense centroid matrix)``."""
    labels = np.array(c.labels, dtype=np.int64)
    rows = np.array([m.row_of(cust) for cust in c.assignment], dtype=np.int64)
    lab = np.searchsorted(labels, np.fromiter(c.assignment.values(), dtype=np.int64))
    sizes = np.bincount(lab, minlength=len(labels))
    ind = sp.csr_matrix(
        (np.ones(len(rows)), (lab, np.arange(len(rows)))), shape=(len(labels), len(rows))
    )
    sums = (ind @ m.values[rows]).toarray()
    return labels, sums / sizes[:, None]


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def write_clustering(c: Clustering, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["customer_id", "cluster_label", "method_tag"])
        for cust, label in c.assignment.items():
            w.writerow([cust, label, c.method])


def read_clustering(path: str | os.PathLike, d: Dataset) -> Clustering:
    """Load a clustering dump; its customers must be exactly ``d``'s customers."""
    assignment: dict[int, int] = {}
    methods = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["customer_id", "cluster_label", "method_tag"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                cust, label, tag = int(row[0]), int(row[1]), row[2]
            except (ValueError, IndexError):
                raise ValueError(f"{path}: line {lineno}: malformed row {row}") from None
            if cust in assignment:
                raise ValueError(f"{path}: line {lineno}: customer {cust} assigned twice")
            if tag not in METHODS:
                raise ValueError(f"{path}: line {lineno}: unknown method tag {tag!r}")
            assignment[cust] = label
            methods.add(tag)
    if len(methods) > 1:
        raise ValueError(f"{path}: mixed method tags {sorted(methods)}")
    known = set(d.customer_ids().tolist())
    if set(assignment) != known:
        missing = len(known - set(assignment))
        extra = len(set(assignment) - known)
        raise ValueError(
            f"{path}: clustering does not match the training data "
            f"({missing} customers missing, {extra} unknown)"
        )
    method = methods.pop() if methods else CBC
    if method == CBC:
        cats = set(d.category_ids().tolist())
        unknown = sorted(set(assignment.values()) - cats)
        if unknown:
            raise ValueError(f"{path}: CBC labels {unknown[:5]} are not training categories")
    return form_clusters(assignment, d, method)
