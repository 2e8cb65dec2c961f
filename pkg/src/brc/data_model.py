"""Behavior-event records, CSV ingestion and the two-phase preprocessing filter.

A :class:`Dataset` stores its records column-wise in numpy arrays and keeps
sorted group indexes per customer, product and category.  Datasets are never
mutated; every filter returns a new one.
"""

from __future__ import annotations

import enum
import io
import os
from array import array
from collections.abc import Iterable, Iterator, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

__all__ = [
    "BehaviorType",
    "BehaviorRecord",
    "Dataset",
    "StatsSummary",
    "ParseError",
    "FieldCountError",
    "InvalidIdError",
    "UnknownBehaviorError",
    "NegativeTimestampError",
    "CategoryConflictError",
    "DEFAULT_COLUMNS",
    "parse_record",
    "load_dataset",
    "read_dataset",
    "write_dataset",
    "filter_phase1",
    "filter_phase2",
    "preprocess",
    "dataset_stats",
]


class BehaviorType(enum.IntEnum):
    PV = 0
    FAV = 1
    CART = 2
    BUY = 3

    @property
    def token(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, token: str) -> BehaviorType:
        try:
            return _TOKENS[token]
        except KeyError:
            raise ValueError(f"unknown behavior token {token!r}") from None

    def __str__(self) -> str:
        return self.token


_TOKENS = {b.token: b for b in BehaviorType}


class BehaviorRecord(NamedTuple):
    customer_id: int
    product_id: int
    category_id: int
    behavior: BehaviorType
    timestamp: int

    def to_row(self) -> str:
        return (
            f"{self.customer_id},{self.product_id},{self.category_id},"
            f"{self.behavior.token},{self.timestamp}"
        )


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


class ParseError(ValueError):
    """A row that cannot be turned into a :class:`BehaviorRecord`."""

    kind = "parse error"

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        self.detail = message
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(f"{where}{self.kind}: {message}")

    def at(self, lineno: int) -> ParseError:
        return type(self)(self.detail, lineno)


class FieldCountError(ParseError):
    kind = "malformed field count"


class InvalidIdError(ParseError):
    kind = "invalid id"


class UnknownBehaviorError(ParseError):
    kind = "unknown behavior token"


class NegativeTimestampError(ParseError):
    kind = "invalid timestamp"


class CategoryConflictError(ValueError):
    """One product mapped to two different categories."""

    def __init__(self, product_id: int, categories: Sequence[int]):
        self.product_id = product_id
        self.categories = tuple(sorted(categories))
        super().__init__(
            f"product {product_id} appears under conflicting categories "
            f"{list(self.categories)}"
        )


FIELDS = ("customer", "product", "category", "behavior", "timestamp")
# Taobao UserBehavior layout: user, item, category, behavior, timestamp.
DEFAULT_COLUMNS = FIELDS

_HEADER_ALIASES = {
    "customer": "customer", "customer_id": "customer", "user": "customer",
    "user_id": "customer", "userid": "customer",
    "product": "product", "product_id": "product", "item": "product",
    "item_id": "product", "itemid": "product",
    "category": "category", "category_id": "category", "categoryid": "category",
    "cat": "category",
    "behavior": "behavior", "behavior_type": "behavior", "behaviour": "behavior",
    "type": "behavior",
    "timestamp": "timestamp", "time": "timestamp", "ts": "timestamp",
}


def _column_positions(columns: Sequence[str]) -> tuple[int, ...]:
    names = [_HEADER_ALIASES.get(c.strip().lower()) for c in columns]
    if None in names or sorted(names) != sorted(FIELDS):
        raise ValueError(
            f"column mapping must name each of {FIELDS} exactly once, got {list(columns)}"
        )
    return tuple(names.index(f) for f in FIELDS)


_DEFAULT_POSITIONS = _column_positions(DEFAULT_COLUMNS)


def _parse_fields(line: str, positions: tuple[int, ...]) -> tuple[int, int, int, int, int]:
    parts = line.rstrip("\r\n").split(",")
    if len(parts) != 5:
        raise FieldCountError(f"expected 5 fields, got {len(parts)}")
    ids = []
    for name, pos in zip(FIELDS[:3], positions[:3]):
        raw = parts[pos].strip()
        try:
            value = int(raw)
        except ValueError:
            raise InvalidIdError(f"{name} id {raw!r} is not an integer") from None
        if value < 0:
            raise InvalidIdError(f"{name} id {value} is negative")
        ids.append(value)
    token = parts[positions[3]].strip()
    behavior = _TOKENS.get(token)
    if behavior is None:
        raise UnknownBehaviorError(repr(token))
    raw = parts[positions[4]].strip()
    try:
        ts = int(raw)
    except ValueError:
        raise NegativeTimestampError(f"timestamp {raw!r} is not an integer") from None
    if ts < 0:
        raise NegativeTimestampError(f"timestamp {ts} is negative")
    return ids[0], ids[1], ids[2], int(behavior), ts


def parse_record(
    line: str, lineno: int | None = None, columns: Sequence[str] = DEFAULT_COLUMNS
) -> BehaviorRecord:
    """Parse one comma-separated row.

    Raises a :class:`ParseError` subclass naming the failure and, when given,
    the line number.
    """
    positions = _DEFAULT_POSITIONS if columns is DEFAULT_COLUMNS else _column_positions(columns)
    try:
        c, p, k, b, t = _parse_fields(line, positions)
    except ParseError as exc:
        if lineno is None:
            raise
        raise exc.at(lineno) from None
    return BehaviorRecord(c, p, k, BehaviorType(b), t)


# ---------------------------------------------------------------------------
# Indexes and the Dataset container
# ---------------------------------------------------------------------------


class GroupIndex(Mapping):
    """Read-only mapping ``key -> array of values`` built from a key column.

    Values default to record positions, ascending.
    """

    def __init__(self, keys: np.ndarray, values: np.ndarray | None = None):
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        self._keys, starts, counts = np.unique(
            sorted_keys, return_index=True, return_counts=True
        )
        self._starts = starts
        self._counts = counts
        self._values = order if values is None else values[order]

    def _slot(self, key) -> int:
        i = int(np.searchsorted(self._keys, key))
        if i >= len(self._keys) or self._keys[i] != key:
            raise KeyError(key)
        return i

    def __getitem__(self, key) -> np.ndarray:
        i = self._slot(key)
        s = self._starts[i]
        return self._values[s : s + self._counts[i]]

    def __contains__(self, key) -> bool:
        try:
            self._slot(key)
        except (KeyError, TypeError):
            return False
        return True

    def __iter__(self) -> Iterator[int]:
        return (int(k) for k in self._keys)

    def __len__(self) -> int:
        return len(self._keys)

    def count(self, key) -> int:
        return int(self._counts[self._slot(key)])

    @property
    def keys_array(self) -> np.ndarray:
        return self._keys

    @property
    def counts_array(self) -> np.ndarray:
        return self._counts


class _RecordView(Sequence):
    def __init__(self, ds: Dataset):
        self._ds = ds

    def __len__(self) -> int:
        return len(self._ds.customers)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        d = self._ds
        return BehaviorRecord(
            int(d.customers[i]), int(d.products[i]), int(d.categories[i]),
            BehaviorType(int(d.behaviors[i])), int(d.timestamps[i]),
        )

    def __iter__(self) -> Iterator[BehaviorRecord]:
        d = self._ds
        cols = zip(
            d.customers.tolist(), d.products.tolist(), d.categories.tolist(),
            d.behaviors.tolist(), d.timestamps.tolist(),
        )
        kinds = list(BehaviorType)
        for c, p, k, b, t in cols:
            yield BehaviorRecord(c, p, k, kinds[b], t)


@dataclass(frozen=True)
class StatsSummary:
    customer_count: int = 0
    category_count: int = 0
    product_count: int = 0
    record_count: int = 0
    behavior_counts: dict[str, int] = field(
        default_factory=lambda: {b.token: 0 for b in BehaviorType}
    )

    def to_dict(self) -> dict:
        return {
            "customer_count": self.customer_count,
            "category_count": self.category_count,
            "product_count": self.product_count,
            "record_count": self.record_count,
            "behavior_counts": dict(self.behavior_counts),
        }


class Dataset:
    """Immutable, indexed collection of behavior records.

    Columns are exposed as read-only numpy arrays (``customers``, ``products``,
    ``categories``, ``behaviors``, ``timestamps``).  ``records`` is a sequence
    view yielding :class:`BehaviorRecord` tuples in input order.
    """

    def __init__(
        self,
        customers=(),
        products=(),
        categories=(),
        behaviors=(),
        timestamps=(),
        *,
        skipped: int = 0,
        parse_errors: Sequence[ParseError] = (),
    ):
        cols = [
            np.asarray(customers, dtype=np.int64),
            np.asarray(products, dtype=np.int64),
            np.asarray(categories, dtype=np.int64),
            np.asarray(behaviors, dtype=np.int8),
            np.asarray(timestamps, dtype=np.int64),
        ]
        n = len(cols[0])
        if any(len(c) != n for c in cols):
            raise ValueError("column lengths differ")
        if n and (
            min(int(c.min()) for c in cols) < 0
            or int(cols[3].max()) > max(BehaviorType)
        ):
            raise ValueError("ids, behaviors and timestamps must be non-negative and valid")
        for c in cols:
            c.setflags(write=False)
        (self.customers, self.products, self.categories,
         self.behaviors, self.timestamps) = cols
        self.skipped = skipped
        self.parse_errors = tuple(parse_errors)

        self.customer_index = GroupIndex(self.customers)
        self.product_index = GroupIndex(self.products)
        pairs = np.unique(np.stack([self.products, self.categories], axis=1), axis=0) \
            if n else np.empty((0, 2), dtype=np.int64)
        if len(pairs) != len(self.product_index):
            dup = pairs[:-1, 0] == pairs[1:, 0]
            pid = int(pairs[:-1][dup][0, 0])
            raise CategoryConflictError(pid, pairs[pairs[:, 0] == pid, 1].tolist())
        self._pc_products = pairs[:, 0]
        self._pc_categories = pairs[:, 1]
        self.category_index = GroupIndex(self._pc_categories, self._pc_products)
        self.stats = self._compute_stats()

    @classmethod
    def from_records(cls, records: Iterable[BehaviorRecord], *, skipped: int = 0) -> Dataset:
        rows = list(records)
        if not rows:
            return cls(skipped=skipped)
        c, p, k, b, t = zip(*rows)
        return cls(c, p, k, [int(x) for x in b], t, skipped=skipped)

    def _compute_stats(self) -> StatsSummary:
        per_type = np.bincount(self.behaviors, minlength=len(BehaviorType))
        return StatsSummary(
            customer_count=len(self.customer_index),
            category_count=len(self.category_index),
            product_count=len(self.product_index),
            record_count=len(self.customers),
            behavior_counts={b.token: int(per_type[b]) for b in BehaviorType},
        )

    def __len__(self) -> int:
        return len(self.customers)

    def __repr__(self) -> str:
        s = self.stats
        return (
            f"Dataset(records={s.record_count}, customers={s.customer_count}, "
            f"products={s.product_count}, categories={s.category_count})"
        )

    @property
    def records(self) -> _RecordView:
        return _RecordView(self)

    def customer_ids(self) -> np.ndarray:
        return self.customer_index.keys_array

    def product_ids(self) -> np.ndarray:
        return self.product_index.keys_array

    def category_ids(self) -> np.ndarray:
        return self.category_index.keys_array

    def record_count(self, customer_id: int) -> int:
        """CB for one customer; 0 when the customer is absent."""
        if customer_id not in self.customer_index:
            return 0
        return self.customer_index.count(customer_id)

    def customer_records(self, customer_id: int) -> list[BehaviorRecord]:
        rec = self.records
        return [rec[int(i)] for i in self.customer_index[customer_id]]

    def product_category(self, product_id: int) -> int:
        i = int(np.searchsorted(self._pc_products, product_id))
        if i >= len(self._pc_products) or self._pc_products[i] != product_id:
            raise KeyError(product_id)
        return int(self._pc_categories[i])

    def select(self, mask: np.ndarray) -> Dataset:
        """New dataset holding the records where ``mask`` is true, order kept."""
        mask = np.asarray(mask, dtype=bool)
        return Dataset(
            self.customers[mask], self.products[mask], self.categories[mask],
            self.behaviors[mask], self.timestamps[mask],
        )

    def restrict_customers(self, customer_ids: Iterable[int]) -> Dataset:
        keep = np.fromiter(customer_ids, dtype=np.int64)
        return self.select(np.isin(self.customers, keep))

    def iter_rows(self) -> Iterator[str]:
        for r in self.records:
            yield r.to_row()


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


class _Columns:
    def __init__(self):
        self.c = array("q")
        self.p = array("q")
        self.k = array("q")
        self.b = array("b")
        self.t = array("q")

    def add(self, row):
        c, p, k, b, t = row
        self.c.append(c)
        self.p.append(p)
        self.k.append(k)
        self.b.append(b)
        self.t.append(t)

    def extend(self, other: _Columns):
        for name in "cpkbt":
            getattr(self, name).extend(getattr(other, name))

    def build(self, errors: Sequence[ParseError]) -> Dataset:
        return Dataset(
            np.frombuffer(self.c, dtype=np.int64) if self.c else (),
            np.frombuffer(self.p, dtype=np.int64) if self.p else (),
            np.frombuffer(self.k, dtype=np.int64) if self.k else (),
            np.frombuffer(self.b, dtype=np.int8) if self.b else (),
            np.frombuffer(self.t, dtype=np.int64) if self.t else (),
            skipped=len(errors),
            parse_errors=errors,
        )


def _resolve_positions(lines: Iterator[str], columns, header: bool):
    """Return (positions, lines consumed by the header)."""
    if header:
        try:
            first = next(lines)
        except StopIteration:
            return _DEFAULT_POSITIONS, 0
        return _column_positions(first.rstrip("\r\n").split(",")), 1
    if columns is None or columns is DEFAULT_COLUMNS:
        return _DEFAULT_POSITIONS, 0
    return _column_positions(columns), 0


def _parse_lines(lines: Iterable[str], positions, on_error: str, first_lineno: int):
    cols = _Columns()
    errors: list[ParseError] = []
    for lineno, line in enumerate(lines, start=first_lineno):
        if not line.strip():
            continue
        try:
            cols.add(_parse_fields(line, positions))
        except ParseError as exc:
            exc = exc.at(lineno)
            if on_error == "raise":
                raise exc from None
            errors.append(exc)
    return cols, errors


def load_dataset(
    source: Iterable[str],
    *,
    on_error: str = "raise",
    columns: Sequence[str] | None = None,
    header: bool = False,
) -> Dataset:
    """Build a :class:`Dataset` from a stream of CSV lines in one pass.

    ``on_error`` is ``"raise"`` (fail fast on the first bad row) or ``"skip"``
    (drop bad rows; their number lands in ``Dataset.skipped`` and the errors
    in ``Dataset.parse_errors``).  Category conflicts are always fatal.
    """
    if on_error not in ("raise", "skip"):
        raise ValueError("on_error must be 'raise' or 'skip'")
    it = iter(source)
    positions, consumed = _resolve_positions(it, columns, header)
    cols, errors = _parse_lines(it, positions, on_error, consumed + 1)
    return cols.build(errors)


def _chunk_bounds(path: str, start: int, parts: int) -> list[tuple[int, int]]:
    size = os.path.getsize(path)
    if parts <= 1 or size - start < (1 << 20):
        return [(start, size)]
    step = (size - start) // parts
    bounds = [start]
    with open(path, "rb") as fh:
        for i in range(1, parts):
            fh.seek(max(start + i * step, bounds[-1]))
            fh.readline()
            pos = fh.tell()
            if pos >= size:
                break
            if pos > bounds[-1]:
                bounds.append(pos)
    bounds.append(size)
    return list(zip(bounds[:-1], bounds[1:]))


def _parse_chunk(path: str, start: int, end: int, positions, on_error: str):
    with open(path, "rb") as fh:
        fh.seek(start)
        blob = fh.read(end - start)
    lines = io.StringIO(blob.decode("utf-8"), newline="")
    cols = _Columns()
    errors: list[tuple[int, ParseError]] = []
    n = 0
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            cols.add(_parse_fields(line, positions))
        except ParseError as exc:
            errors.append((n, exc))
            if on_error == "raise":
                break
    return cols, errors, n


def read_dataset(
    path: str | os.PathLike,
    *,
    on_error: str = "raise",
    columns: Sequence[str] | None = None,
    header: bool = False,
    workers: int = 1,
) -> Dataset:
    """Load a CSV file, optionally parsing byte-range chunks in parallel.

    Chunks are reassembled in file order, so the result does not depend on
    ``workers``.  Error line numbers are physical 1-based file lines.
    """
    if on_error not in ("raise", "skip"):
        raise ValueError("on_error must be 'raise' or 'skip'")
    path = os.fspath(path)
    with open(path, encoding="utf-8", newline="") as fh:
        positions, consumed = _resolve_positions(fh, columns, header)
    start = 0
    if consumed:
        with open(path, "rb") as fh:
            fh.readline()
            start = fh.tell()

    bounds = _chunk_bounds(path, start, workers)
    if len(bounds) == 1:
        results = [_parse_chunk(path, *bounds[0], positions, on_error)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_parse_chunk, path, s, e, positions, on_error) for s, e in bounds
            ]
            results = [f.result() for f in futures]

    total = _Columns()
    errors: list[ParseError] = []
    offset = consumed
    for cols, errs, n_lines in results:
        for local, exc in errs:
            exc = exc.at(offset + local)
            if on_error == "raise":
                raise exc
            errors.append(exc)
        total.extend(cols)
        offset += n_lines
    return total.build(errors)


def write_dataset(ds: Dataset, path_or_file) -> None:
    """Write records back out in the default column order, LF line endings."""
    if hasattr(path_or_file, "write"):
        for row in ds.iter_rows():
            path_or_file.write(row + "\n")
        return
    with open(path_or_file, "w", encoding="utf-8", newline="\n") as fh:
        write_dataset(ds, fh)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def filter_phase1(d: Dataset, phi: int) -> Dataset:
    """Drop products seen only as page views, fewer than ``phi`` times.

    Categories and customers left without records vanish with them.
    """
    if phi < 1:
        raise ValueError("phi must be >= 1")
    if not len(d):
        return d.select(np.zeros(0, dtype=bool))
    # product_index keys are sorted; map each record to its product slot
    slot = np.searchsorted(d.product_index.keys_array, d.products)
    total = d.product_index.counts_array
    pv = np.bincount(slot, weights=(d.behaviors == BehaviorType.PV), minlength=len(total))
    drop = (pv == total) & (total < phi)
    return d.select(~drop[slot])


def filter_phase2(d: Dataset, tau: int) -> Dataset:
    """Drop customers with fewer than ``tau`` records, cascading to products."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if not len(d):
        return d.select(np.zeros(0, dtype=bool))
    slot = np.searchsorted(d.customer_index.keys_array, d.customers)
    keep = d.customer_index.counts_array >= tau
    return d.select(keep[slot])


def preprocess(d: Dataset, phi: int, tau: int) -> tuple[Dataset, Dataset]:
    """Run both phases; returns (after phase 1, after phase 2)."""
    first = filter_phase1(d, phi)
    return first, filter_phase2(first, tau)


def dataset_stats(d: Dataset) -> StatsSummary:
    return d.stats
