import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from brc.correlation import (
    UnknownCustomerError,
    cooperation,
    correlation,
    correlation_matrix,
)
from brc.data_model import BehaviorType, Dataset
from conftest import random_records, to_dataset


def test_cooperation_zero_for_untouched_category():
    d = to_dataset([(1, 10, 100, 0, 1), (1, 11, 200, 3, 2)])
    assert cooperation(d, 1, 300) == 0


def test_cooperation_counts_every_behavior_type():
    d = to_dataset([(1, 10, 100, 0, 1)] * 3 + [(1, 11, 100, 3, 2), (1, 12, 200, 0, 3)])
    assert cooperation(d, 1, 100) == 4


def test_cooperation_unknown_customer():
    with pytest.raises(UnknownCustomerError):
        cooperation(to_dataset([(1, 10, 100, 0, 1)]), 2, 100)


def test_correlation_ratio():
    recs = [(1, 10, 100, 0, i) for i in range(4)] + [(1, 20, 200, 0, i) for i in range(6)]
    assert correlation(to_dataset(recs), 1, 100) == 0.4


def test_single_category_profile():
    d = to_dataset([(1, 10, 100, 0, 1), (1, 11, 100, 2, 2)])
    assert correlation(d, 1, 100) == 1.0
    assert correlation(d, 1, 200) == 0.0


def test_matrix_row_split():
    recs = [(1, 10, 100, 0, i) for i in range(3)] + [(1, 20, 200, 1, 9)]
    m = correlation_matrix(to_dataset(recs))
    assert m.dense().tolist() == [[0.75, 0.25]]


def test_empty_matrix():
    m = correlation_matrix(Dataset())
    assert m.shape == (0, 0)


def test_random_fixture_matches_linear_scan(rng):
    for _ in range(5):
        recs = random_records(rng, n_records=50)
        d = to_dataset(recs)
        for c in oracles.customers_of(recs):
            for cat in oracles.categories_of(recs) + [999_999]:
                assert cooperation(d, c, cat) == oracles.cooperation(recs, c, cat)
                assert correlation(d, c, cat) == oracles.correlation(recs, c, cat)


def test_matrix_matches_pointwise(rng):
    recs = random_records(rng, 20, 8, 60, 120)
    d = to_dataset(recs)
    m = correlation_matrix(d)
    dense = m.dense()
    for i, c in enumerate(m.customers):
        for j, cat in enumerate(m.categories):
            assert dense[i, j] == correlation(d, int(c), int(cat))


def test_weight_hook():
    recs = [(1, 10, 100, BehaviorType.PV, 1), (1, 11, 200, BehaviorType.BUY, 2)]
    d = to_dataset(recs)
    w = {BehaviorType.BUY: 3.0}
    assert cooperation(d, 1, 200, w) == 3.0
    assert correlation(d, 1, 200, w) == 0.75
    m = correlation_matrix(d, w)
    assert m.dense().tolist() == [[0.25, 0.75]]


def test_triplet_dump(tmp_path):
    m = correlation_matrix(to_dataset([(2, 10, 100, 0, 1), (1, 11, 200, 0, 1)]))
    path = tmp_path / "m.csv"
    m.write_triplets(path)
    assert path.read_text().splitlines() == [
        "customer_id,category_id,value", "1,200,1.0", "2,100,1.0",
    ]


# -- properties -----------------------------------------------------------------


def _recs(seed):
    return random_records(np.random.default_rng(seed))


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_rows_are_stochastic(seed):
    m = correlation_matrix(to_dataset(_recs(seed)))
    assert np.all(m.values.data >= 0) and np.all(m.values.data <= 1)
    np.testing.assert_allclose(np.asarray(m.values.sum(axis=1)).ravel(), 1.0, atol=1e-9, rtol=0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    recs = _recs(seed)
    shuffled = [recs[i] for i in np.random.default_rng(seed + 1).permutation(len(recs))]
    a = correlation_matrix(to_dataset(recs)).dense()
    b = correlation_matrix(to_dataset(shuffled)).dense()
    assert np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_behavior_type_blindness(seed):
    recs = _recs(seed)
    relabeled = [(c, p, k, (b + 1) % 4, t) for c, p, k, b, t in recs]
    a = correlation_matrix(to_dataset(recs)).dense()
    b = correlation_matrix(to_dataset(relabeled)).dense()
    assert np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_additivity(seed):
    recs = _recs(seed)
    half = len(recs) // 2
    a, b = recs[:half], recs[half:]
    whole = to_dataset(recs)
    for c in oracles.customers_of(recs)[:5]:
        for cat in oracles.categories_of(recs):
            parts = sum(
                cooperation(to_dataset(part), c, cat)
                for part in (a, b)
                if any(r[0] == c for r in part)
            )
            assert cooperation(whole, c, cat) == parts
