import os
import sys

import numpy as np
import pytest
import scipy.sparse as sp

sys.path.insert(0, os.path.dirname(__file__))

from brc.clustering import form_clusters  # noqa: E402
from brc.correlation import CorrelationMatrix  # noqa: E402
from brc.data_model import Dataset  # noqa: E402


def random_records(rng, n_customers=None, n_categories=None, n_products=None, n_records=None):
    """Random raw record tuples with a consistent product -> category map."""
    n_customers = n_customers or int(rng.integers(1, 51))
    n_categories = n_categories or int(rng.integers(1, 21))
    n_products = n_products or int(rng.integers(n_categories, 201))
    n_records = n_records or int(rng.integers(n_customers, 6 * n_customers + 1))
    product_cat = {p: int(rng.integers(n_categories)) + 10 for p in range(1000, 1000 + n_products)}
    products = list(product_cat)
    recs = []
    # every customer gets at least one record
    owners = list(range(1, n_customers + 1)) + [
        int(x) for x in rng.integers(1, n_customers + 1, size=max(0, n_records - n_customers))
    ]
    for c in owners:
        p = products[int(rng.integers(len(products)))]
        recs.append((c, p, product_cat[p], int(rng.integers(4)), int(rng.integers(0, 10_000))))
    order = rng.permutation(len(recs))
    return [recs[i] for i in order]


def to_dataset(records):
    if not records:
        return Dataset()
    c, p, k, b, t = zip(*records)
    return Dataset(c, p, k, b, t)


def point_matrix(points):
    """Wrap arbitrary points as a CorrelationMatrix for geometry tests."""
    X = np.asarray(points, dtype=float)
    n, dim = X.shape
    vals = sp.csr_matrix(X)
    return CorrelationMatrix(
        np.arange(1, n + 1), np.arange(dim), vals, np.ones(n, dtype=np.int64), vals
    )


def point_clustering(labels):
    assignment = {i + 1: int(lab) for i, lab in enumerate(labels)}
    return form_clusters(assignment, Dataset(), method="KMEANS")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance summary
# ---------------------------------------------------------------------------

def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS, status

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        ok, text = RESULTS[key]
        terminalreporter.write_line(f"[{status(ok)}] {key}: {text}")
