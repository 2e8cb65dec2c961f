import io
import subprocess

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brc.data_model import (
    BehaviorRecord,
    BehaviorType,
    CategoryConflictError,
    Dataset,
    FieldCountError,
    InvalidIdError,
    NegativeTimestampError,
    UnknownBehaviorError,
    dataset_stats,
    filter_phase1,
    filter_phase2,
    load_dataset,
    parse_record,
    read_dataset,
    write_dataset,
)
from conftest import random_records, to_dataset


def rows(*lines):
    return [line + "\n" for line in lines]


class TestBehaviorType:
    def test_round_trip_tokens(self):
        for token in ("pv", "fav", "cart", "buy"):
            assert BehaviorType.parse(token).token == token

    def test_unknown_token(self):
        with pytest.raises(ValueError):
            BehaviorType.parse("click")


class TestParseRecord:
    def test_taobao_row(self):
        r = parse_record("1,2268318,2520377,pv,1511544070")
        assert r == BehaviorRecord(1, 2268318, 2520377, BehaviorType.PV, 1511544070)

    def test_minimal_row(self):
        assert parse_record("7,8,9,buy,0") == BehaviorRecord(7, 8, 9, BehaviorType.BUY, 0)

    def test_crlf(self):
        assert parse_record("7,8,9,cart,5\r\n").behavior is BehaviorType.CART

    @pytest.mark.parametrize(
        "line, exc",
        [
            ("7,8,9,click,0", UnknownBehaviorError),
            ("7,8,9,pv", FieldCountError),
            ("7,8,9,pv,0,1", FieldCountError),
            ("x,8,9,pv,0", InvalidIdError),
            ("7,-8,9,pv,0", InvalidIdError),
            ("7,8,9,pv,-1", NegativeTimestampError),
            ("7,8,9,pv,soon", NegativeTimestampError),
        ],
    )
    def test_errors(self, line, exc):
        with pytest.raises(exc):
            parse_record(line)

    def test_error_carries_line_number(self):
        with pytest.raises(UnknownBehaviorError) as info:
            parse_record("7,8,9,click,0", lineno=42)
        assert info.value.lineno == 42
        assert "line 42" in str(info.value)

    def test_custom_column_order(self):
        r = parse_record("pv,5,1,2,3", columns=("behavior", "timestamp", "user_id",
                                                  "item_id", "category_id"))
        assert r == BehaviorRecord(1, 2, 3, BehaviorType.PV, 5)


class TestLoadDataset:
    def test_empty(self):
        d = load_dataset([])
        s = d.stats
        assert (s.customer_count, s.category_count, s.product_count, s.record_count) == (0, 0, 0, 0)

    def test_counts(self):
        d = load_dataset(rows("1,10,100,pv,1", "1,11,100,buy,2", "2,10,100,pv,3"))
        assert d.stats.customer_count == 2
        assert d.stats.record_count == 3

    def test_skip_mode(self):
        d = load_dataset(rows("1,10,100,pv,1", "1,11,100,click,2", "2,10,100,pv,3"),
                         on_error="skip")
        assert len(d) == 2
        assert d.skipped == 1
        assert d.parse_errors[0].lineno == 2

    def test_fail_fast_reports_line(self):
        with pytest.raises(UnknownBehaviorError) as info:
            load_dataset(rows("1,10,100,pv,1", "1,11,100,click,2"))
        assert info.value.lineno == 2

    def test_conflicting_category_is_fatal_even_when_skipping(self):
        with pytest.raises(CategoryConflictError) as info:
            load_dataset(rows("1,10,100,pv,1", "2,10,101,pv,2"), on_error="skip")
        assert info.value.product_id == 10

    def test_header_mapping(self):
        d = load_dataset(
            rows("item_id,user_id,behavior_type,category_id,timestamp", "10,1,fav,100,7"),
            header=True,
        )
        assert list(d.records) == [BehaviorRecord(1, 10, 100, BehaviorType.FAV, 7)]

    def test_header_line_numbers(self):
        with pytest.raises(InvalidIdError) as info:
            load_dataset(rows("user,item,category,behavior,timestamp", "1,10,100,pv,1",
                              "a,1,1,pv,1"), header=True)
        assert info.value.lineno == 3

    def test_indexes_are_inverses(self, rng):
        recs = random_records(rng, 20, 5, 40, 150)
        d = to_dataset(recs)
        seen = set()
        for cust, pos in d.customer_index.items():
            for i in pos:
                assert recs[i][0] == cust
                seen.add(int(i))
        assert seen == set(range(len(recs)))
        seen = set()
        for prod, pos in d.product_index.items():
            for i in pos:
                assert recs[i][1] == prod
                seen.add(int(i))
        assert seen == set(range(len(recs)))
        expected = {}
        for r in recs:
            expected.setdefault(r[2], set()).add(r[1])
        assert {k: set(v.tolist()) for k, v in d.category_index.items()} == expected

    def test_columns_read_only(self):
        d = load_dataset(rows("1,10,100,pv,1"))
        with pytest.raises(ValueError):
            d.customers[0] = 5


class TestReadDataset:
    def test_matches_streaming_loader(self, tmp_path, rng):
        recs = random_records(rng, 30, 6, 60, 200)
        path = tmp_path / "d.csv"
        path.write_text("".join(BehaviorRecord(c, p, k, BehaviorType(b), t).to_row() + "\n"
                                for c, p, k, b, t in recs))
        a = read_dataset(path)
        b = load_dataset(open(path))
        assert list(a.records) == list(b.records)

    def test_parallel_chunks_keep_order_and_line_numbers(self, tmp_path):
        lines = [f"{i % 997},{i % 5000},{(i % 5000) % 37},pv,{i}" for i in range(60_000)]
        path = tmp_path / "big.csv"
        path.write_text("\n".join(lines) + "\n")
        serial = read_dataset(path)
        parallel = read_dataset(path, workers=4)
        assert np.array_equal(serial.customers, parallel.customers)
        assert np.array_equal(serial.timestamps, parallel.timestamps)

        lines[45_000] = "1,2,3,pv"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(FieldCountError) as info:
            read_dataset(path, workers=4)
        assert info.value.lineno == 45_001
        skipped = read_dataset(path, workers=4, on_error="skip")
        assert skipped.skipped == 1 and skipped.parse_errors[0].lineno == 45_001

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_dataset(tmp_path / "nope.csv")


def test_round_trip(rng):
    d = to_dataset(random_records(rng, 25, 7, 50, 120))
    buf = io.StringIO()
    write_dataset(d, buf)
    back = load_dataset(io.StringIO(buf.getvalue()))
    assert back.stats == d.stats
    assert list(back.records) == list(d.records)
    assert {k: v.tolist() for k, v in back.customer_index.items()} == \
        {k: v.tolist() for k, v in d.customer_index.items()}


class TestPhase1:
    def test_pv_only_product_below_phi_removed(self):
        d = load_dataset(rows(*[f"{c},10,100,pv,{c}" for c in range(1, 6)], "1,11,100,buy,9"))
        out = filter_phase1(d, 1000)
        assert 10 not in out.product_index
        assert 11 in out.product_index

    def test_product_with_a_purchase_kept(self):
        d = load_dataset(rows(*[f"{c},10,100,pv,{c}" for c in range(1, 6)], "6,10,100,buy,9"))
        assert filter_phase1(d, 1000).stats.product_count == 1

    def test_pv_only_product_at_phi_kept(self):
        d = load_dataset(rows(*[f"{c},10,100,pv,{c}" for c in range(1, 6)]))
        assert len(filter_phase1(d, 5)) == 5
        assert len(filter_phase1(d, 6)) == 0

    def test_cascade(self):
        d = load_dataset(rows("1,10,100,pv,1", "2,20,200,buy,2", "2,10,100,pv,3"))
        out = filter_phase1(d, 1000)
        assert out.stats.category_count == 1
        assert out.stats.customer_count == 1
        assert 1 not in out.customer_index


class TestPhase2:
    def _dataset(self, n_small, n_big):
        lines = [f"1,{10 + i},100,pv,{i}" for i in range(n_small)]
        lines += [f"2,{500 + i},200,buy,{i}" for i in range(n_big)]
        return load_dataset(rows(*lines))

    def test_boundary(self):
        out = filter_phase2(self._dataset(49, 50), 50)
        assert list(out.customer_index) == [2]
        assert out.stats.category_count == 1
        out = filter_phase2(self._dataset(50, 50), 50)
        assert list(out.customer_index) == [1, 2]

    def test_identity_when_all_pass(self, rng):
        d = to_dataset(random_records(rng, 10, 4, 30, 60))
        out = filter_phase2(d, 1)
        assert list(out.records) == list(d.records)


class TestStats:
    def test_empty(self):
        s = dataset_stats(Dataset())
        assert s.record_count == 0 and s.product_count == 0

    def test_shared_product(self):
        s = dataset_stats(load_dataset(rows("1,10,100,pv,1", "2,10,100,buy,2")))
        assert s.product_count == 1 and s.record_count == 2

    def test_behavior_counts_sum(self, rng):
        s = to_dataset(random_records(rng)).stats
        assert sum(s.behavior_counts.values()) == s.record_count

    def test_against_shell_count(self, tmp_path, rng):
        recs = random_records(rng, 10, 5, 40, 80)
        path = tmp_path / "fixture.csv"
        write_dataset(to_dataset(recs), path)

        def shell(cmd):
            return int(subprocess.run(["bash", "-c", cmd], capture_output=True, text=True,
                                      check=True).stdout.strip())

        s = read_dataset(path).stats
        assert s.record_count == shell(f"wc -l < {path}")
        assert s.customer_count == shell(f"cut -d, -f1 {path} | sort -u | wc -l")
        assert s.product_count == shell(f"cut -d, -f2 {path} | sort -u | wc -l")
        assert s.category_count == shell(f"cut -d, -f3 {path} | sort -u | wc -l")


# -- properties ----------------------------------------------------------------

seeds = st.integers(0, 2**32 - 1)


def _pv_heavy(seed):
    rng = np.random.default_rng(seed)
    recs = random_records(rng, int(rng.integers(1, 30)), int(rng.integers(1, 8)),
                          int(rng.integers(8, 40)), int(rng.integers(30, 200)))
    # bias towards page views so phase 1 has something to remove
    return [(c, p, k, 0 if rng.random() < 0.7 else b, t) for c, p, k, b, t in recs]


def _counts(d):
    s = d.stats
    return (s.customer_count, s.category_count, s.product_count, s.record_count)


def _assert_consistent(d: Dataset):
    recs = list(d.records)
    assert set(d.customer_index) == {r.customer_id for r in recs}
    assert set(d.product_index) == {r.product_id for r in recs}
    assert set(d.category_index) == {r.category_id for r in recs}
    for cat, prods in d.category_index.items():
        assert {r.product_id for r in recs if r.category_id == cat} == set(prods.tolist())


@settings(max_examples=60, deadline=None)
@given(seed=seeds, phi=st.integers(1, 12))
def test_phase1_idempotent_and_sound(seed, phi):
    d = to_dataset(_pv_heavy(seed))
    once = filter_phase1(d, phi)
    twice = filter_phase1(once, phi)
    assert list(once.records) == list(twice.records)
    _assert_consistent(once)


@settings(max_examples=60, deadline=None)
@given(seed=seeds, tau=st.integers(1, 12))
def test_phase2_idempotent_and_sound(seed, tau):
    d = to_dataset(_pv_heavy(seed))
    once = filter_phase2(d, tau)
    assert list(filter_phase2(once, tau).records) == list(once.records)
    _assert_consistent(once)


@settings(max_examples=60, deadline=None)
@given(seed=seeds, a=st.integers(1, 15), b=st.integers(1, 15))
def test_thresholds_monotone(seed, a, b):
    lo, hi = sorted((a, b))
    d = to_dataset(_pv_heavy(seed))
    for f in (filter_phase1, filter_phase2):
        small, big = _counts(f(d, lo)), _counts(f(d, hi))
        assert all(x >= y for x, y in zip(small, big))
