"""Cluster validity indexes, top-K metrics and the fold-based experiment runner."""

from __future__ import annotations

import configparser
import json
import math
import os
import time
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.spatial.distance import cdist

from .clustering import CBC, FCM, KMEANS, Clustering, cbc_assign, fcm, form_clusters, kmeans
from .correlation import CorrelationMatrix, correlation_matrix
from .data_model import BehaviorRecord, BehaviorType, Dataset, preprocess, read_dataset
from .recommender import BehaviorProfile, BehaviorRecommender, RecommendationList

__all__ = [
    "DegenerateClusteringError",
    "ExperimentError",
    "FoldPlan",
    "ProfileSplit",
    "ExperimentConfig",
    "EvaluationReport",
    "split_folds",
    "split_profile",
    "precision_at_k",
    "recall_at_k",
    "f_measure",
    "db_index",
    "dunn_index",
    "conventional_dunn_index",
    "run_experiment",
]


class DegenerateClusteringError(ValueError):
    pass


class ExperimentError(RuntimeError):
    """A stage failure; ``partial`` holds the report built so far, if any."""

    def __init__(self, stage: str, cause: BaseException, partial: dict | None = None):
        self.stage = stage
        self.cause = cause
        self.partial = partial
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


# ---------------------------------------------------------------------------
# Folds and profile splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    K: int
    seed: int
    assignment: dict[int, int]

    def folds(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.K)]
        for cust, f in self.assignment.items():
            out[f].append(cust)
        return [sorted(f) for f in out]


def split_folds(d: Dataset | Iterable[int], K: int, seed: int = 0) -> FoldPlan:
    """Seeded partition of the customers into ``K`` near-equal folds."""
    customers = np.sort(
        d.customer_ids() if isinstance(d, Dataset) else np.fromiter(d, dtype=np.int64)
    )
    if K < 2:
        raise ValueError("K must be >= 2")
    if K > len(customers):
        raise ValueError(f"K={K} exceeds the number of customers ({len(customers)})")
    perm = np.random.default_rng(seed).permutation(len(customers))
    folds = np.empty(len(customers), dtype=np.int64)
    folds[perm] = np.arange(len(customers)) % K
    return FoldPlan(K, seed, dict(zip(customers.tolist(), folds.tolist())))


@dataclass(frozen=True)
class ProfileSplit:
    observed: BehaviorProfile
    heldout_relevant: frozenset[int]
    observed_records: tuple[BehaviorRecord, ...]
    heldout_records: tuple[BehaviorRecord, ...]
    evaluable: bool
    reason: str | None = None


def split_profile(
    records: Sequence[BehaviorRecord],
    observed_fraction: float = 0.8,
    *,
    relevance: str = "any",
) -> ProfileSplit:
    """Chronological split of one customer's records.

    The earliest ``ceil(fraction * n)`` records (stable on equal timestamps)
    form the observed profile; the distinct products of the rest are the
    relevant set.  ``relevance="buy"`` keeps only purchased products.
    """
    if not 0 < observed_fraction < 1:
        raise ValueError("observed_fraction must lie in (0, 1)")
    if relevance not in ("any", "buy"):
        raise ValueError("relevance must be 'any' or 'buy'")
    n = len(records)
    if n < 2:
        raise ValueError("a profile split needs at least 2 records")
    ordered = sorted(records, key=lambda r: r.timestamp)
    # round away float noise such as 0.7 * 10 = 7.000000000000001
    cut = math.ceil(round(observed_fraction * n, 9))
    observed, heldout = tuple(ordered[:cut]), tuple(ordered[cut:])
    profile = BehaviorProfile.from_records(records[0].customer_id, observed)
    rel = frozenset(
        r.product_id for r in heldout
        if relevance == "any" or r.behavior == BehaviorType.BUY
    )
    reason = None
    if not rel:
        reason = "empty_heldout"
    elif rel <= profile.product_counts.keys():
        reason = "fully_seen"
    return ProfileSplit(profile, rel, observed, heldout, reason is None, reason)


# ---------------------------------------------------------------------------
# Recommendation metrics
# ---------------------------------------------------------------------------


def _top(rec: RecommendationList | Sequence[int], K: int) -> set[int]:
    products = rec.products if isinstance(rec, RecommendationList) else list(rec)
    return set(products[:K])


def precision_at_k(rec: RecommendationList | Sequence[int], rel: Iterable[int], K: int) -> float:
    """Hits in the first ``K`` items over ``K``; short lists are not rescaled."""
    if K < 1:
        raise ValueError("K must be >= 1")
    return len(_top(rec, K) & set(rel)) / K


def recall_at_k(rec: RecommendationList | Sequence[int], rel: Iterable[int], K: int) -> float:
    rel = set(rel)
    if not rel:
        raise ValueError("recall is undefined for an empty relevant set")
    if K < 1:
        raise ValueError("K must be >= 1")
    return len(_top(rec, K) & rel) / len(rel)


def f_measure(p: float, r: float) -> float:
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


# ---------------------------------------------------------------------------
# Validity indexes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Geometry:
    labels: np.ndarray
    dispersion: np.ndarray      # mean member-to-centroid distance
    separation: np.ndarray      # centroid-to-centroid distances, N x N


_DENSE_LIMIT = 50_000_000


def _geometry(c: Clustering, m: CorrelationMatrix) -> _Geometry:
    labels = np.array(c.labels, dtype=np.int64)
    n_cat = m.shape[1]
    disp = np.empty(len(labels))
    supports, cvals = [], []
    for i, label in enumerate(labels):
        rows = np.array(sorted(m.row_of(x) for x in c.members[int(label)]))
        sub = m.values[rows]
        support = np.unique(sub.indices)
        block = sub[:, support].toarray()
        centroid = block.mean(axis=0)
        disp[i] = float(np.mean(np.linalg.norm(block - centroid, axis=1)))
        supports.append(support)
        cvals.append(centroid)

    N = len(labels)
    if N * max(n_cat, 1) <= _DENSE_LIMIT:
        C = np.zeros((N, n_cat))
        for i, (s, v) in enumerate(zip(supports, cvals)):
            C[i, s] = v
        sep = cdist(C, C)
    else:
        # too large for a dense centroid matrix: expand |a-b|^2 on sparse rows
        import scipy.sparse as sp

        indptr = np.concatenate([[0], np.cumsum([len(s) for s in supports])])
        C = sp.csr_matrix(
            (np.concatenate(cvals), np.concatenate(supports), indptr), shape=(N, n_cat)
        )
        sq = np.asarray(C.multiply(C).sum(axis=1)).ravel()
        gram = (C @ C.T).toarray()
        sep = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * gram, 0.0))
        np.fill_diagonal(sep, 0.0)
    return _Geometry(labels, disp, sep)


def _need_two(c: Clustering) -> None:
    if len(c.members) < 2:
        raise DegenerateClusteringError("validity indexes need at least 2 non-empty clusters")


def db_index(c: Clustering, m: CorrelationMatrix) -> float:
    """Mean over clusters of the worst (dispersion_i + dispersion_j) / separation_ij."""
    _need_two(c)
    g = _geometry(c, m)
    N = len(g.labels)
    off = ~np.eye(N, dtype=bool)
    if np.any(g.separation[off] == 0):
        raise DegenerateClusteringError("two cluster centroids coincide")
    ratio = (g.dispersion[:, None] + g.dispersion[None, :]) / np.where(off, g.separation, 1.0)
    ratio[~off] = -np.inf
    return float(np.mean(ratio.max(axis=1)))


def dunn_index(c: Clustering, m: CorrelationMatrix) -> float:
    """Largest centroid separation over the smallest cluster dispersion."""
    _need_two(c)
    g = _geometry(c, m)
    low = float(g.dispersion.min())
    if low == 0:
        raise DegenerateClusteringError(
            "a cluster has zero dispersion (singleton or duplicate points)"
        )
    N = len(g.labels)
    return float(g.separation[~np.eye(N, dtype=bool)].max()) / low


def conventional_dunn_index(c: Clustering, m: CorrelationMatrix) -> float:
    """Textbook Dunn: closest pair of points in different clusters over the
    widest cluster diameter.  Quadratic in the number of customers."""
    _need_two(c)
    X = m.dense()
    labs = np.array([c.assignment[int(x)] for x in m.customers])
    diam = 0.0
    sep = np.inf
    for label in c.labels:
        inside = labs == label
        A = X[inside]
        if len(A) > 1:
            diam = max(diam, float(cdist(A, A).max()))
        B = X[~inside]
        sep = min(sep, float(cdist(A, B).min()))
    if diam == 0:
        raise DegenerateClusteringError("all clusters have zero diameter")
    return sep / diam


# ---------------------------------------------------------------------------
# Experiment configuration and report
# ---------------------------------------------------------------------------


def _int_list(raw) -> tuple[int, ...]:
    if isinstance(raw, (list, tuple)):
        return tuple(int(x) for x in raw)
    return tuple(int(x) for x in str(raw).replace(" ", "").split(",") if x)


def _str_list(raw) -> tuple[str, ...]:
    if isinstance(raw, (list, tuple)):
        return tuple(str(x).strip().lower() for x in raw)
    return tuple(x.strip().lower() for x in str(raw).split(",") if x.strip())


def _bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    v = str(raw).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


_METHOD_NAMES = ("cbc", "kmeans", "fcm", "random")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    phi: int = 1000
    tau: int = 50
    preprocess: bool = True
    folds: int = 5
    seed: int = 0
    observed_fraction: float = 0.8
    top_k: tuple[int, ...] = (1, 3, 6)
    methods: tuple[str, ...] = ("cbc",)
    clusters: tuple[int, ...] = (4,)
    fuzzifier: float = 2.0
    kmeans_init: str = "random"
    max_iter: int = 100
    relevance: str = "any"
    include_seen: bool = False
    validity: bool = True
    conventional_dunn: bool = False
    header: bool = False

    _CASTS = {
        "dataset": str, "phi": int, "tau": int, "preprocess": _bool, "folds": int,
        "seed": int, "observed_fraction": float, "top_k": _int_list,
        "methods": _str_list, "clusters": _int_list, "fuzzifier": float,
        "kmeans_init": str, "max_iter": int, "relevance": str,
        "include_seen": _bool, "validity": _bool, "conventional_dunn": _bool,
        "header": _bool,
    }

    def __post_init__(self):
        if self.phi < 1 or self.tau < 1:
            raise ValueError("phi and tau must be >= 1")
        if not self.top_k or min(self.top_k) < 1:
            raise ValueError("top_k needs at least one positive size")
        unknown = set(self.methods) - set(_METHOD_NAMES)
        if unknown or not self.methods:
            raise ValueError(f"methods must be drawn from {_METHOD_NAMES}, got {self.methods}")
        if self.relevance not in ("any", "buy"):
            raise ValueError("relevance must be 'any' or 'buy'")
        if not 0 < self.observed_fraction < 1:
            raise ValueError("observed_fraction must lie in (0, 1)")
        if self.fuzzifier <= 1:
            raise ValueError("fuzzifier must be > 1")

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> ExperimentConfig:
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().lower()
            if key not in cls._CASTS:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = cls._CASTS[key](raw)
        if "dataset" not in kwargs:
            raise ValueError("config needs a 'dataset' entry")
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> ExperimentConfig:
        """Read ``key = value`` lines, optionally under an ``[experiment]`` header.

        A relative dataset path is resolved against the config file's folder.
        """
        text = open(path, encoding="utf-8").read()
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        if not any(line.strip().startswith("[") for line in text.splitlines()):
            text = "[experiment]\n" + text
        parser.read_string(text, source=str(path))
        if not parser.has_section("experiment"):
            raise ValueError(f"{path}: missing [experiment] section")
        values = dict(parser.items("experiment"))
        cfg = cls.from_mapping(values)
        if not os.path.isabs(cfg.dataset):
            base = os.path.dirname(os.path.abspath(path))
            cfg = replace(cfg, dataset=os.path.normpath(os.path.join(base, cfg.dataset)))
        return cfg

    def with_overrides(self, **overrides) -> ExperimentConfig:
        clean = {k: v for k, v in overrides.items() if v is not None}
        merged = {**self.to_dict(), **clean}
        return ExperimentConfig.from_mapping(merged)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("top_k", "methods", "clusters"):
            out[key] = list(out[key])
        return out


@dataclass
class EvaluationReport:
    """Experiment results; everything except ``runtime`` is deterministic."""

    config: dict
    dataset: dict
    clustering: list[dict]
    recommendation: list[dict]
    folds: list[dict]
    metadata: dict
    runtime: dict = field(default_factory=dict)

    def to_dict(self, *, include_runtime: bool = True) -> dict:
        out = asdict(self)
        if not include_runtime:
            out.pop("runtime")
        return out

    def to_json(self, *, include_runtime: bool = True) -> str:
        return json.dumps(self.to_dict(include_runtime=include_runtime), indent=2,
                          sort_keys=True) + "\n"

    def metric(self, method: str, k: int, name: str) -> float:
        for row in self.recommendation:
            if row["method"] == method and row["top_k"] == k:
                return row[name]
        raise KeyError((method, k))

    def to_table(self) -> str:
        lines = []
        if self.clustering:
            lines.append("Clustering validity (mean over folds)")
            lines.append(f"{'Method':<12}{'K':>8}{'DB index':>14}{'Dunn index':>14}")
            for row in _validity_summary(self.clustering):
                db = "n/a" if row["db"] is None else f"{row['db']:.4f}"
                dunn = "n/a" if row["dunn"] is None else f"{row['dunn']:.4f}"
                lines.append(f"{row['method']:<12}{row['clusters']:>8}{db:>14}{dunn:>14}")
            lines.append("")
        lines.append("Recommendation (percent)")
        lines.append(f"{'No. Reco':<10}{'Method':<20}{'Precision':>11}{'Recall':>9}{'F-measure':>11}")
        last_k = None
        for row in sorted(self.recommendation, key=lambda r: (r["top_k"], _method_rank(r["method"]))):
            tag = f"Top-{row['top_k']}" if row["top_k"] != last_k else ""
            last_k = row["top_k"]
            lines.append(
                f"{tag:<10}{row['method']:<20}{100 * row['precision']:>11.2f}"
                f"{100 * row['recall']:>9.2f}{100 * row['f_measure']:>11.2f}"
            )
        return "\n".join(lines) + "\n"


def _method_rank(name: str) -> tuple:
    order = ("Random", "FCM-BR", "Kmeans-BR", "BRC")
    head = name.split(" ")[0]
    return (order.index(head) if head in order else len(order), name)


def _validity_summary(rows: list[dict]) -> list[dict]:
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r["method"], []).append(r)
    out = []
    for method, rs in groups.items():
        def mean(key):
            vals = [r[key] for r in rs if r.get(key) is not None]
            return float(np.mean(vals)) if vals else None

        out.append({
            "method": method,
            "clusters": int(round(np.mean([r["clusters"] for r in rs]))),
            "db": mean("db"),
            "dunn": mean("dunn"),
        })
    return out


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------


def _fold_seed(seed: int, fold: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([seed, fold, salt]).generate_state(1)[0])


def _variants(cfg: ExperimentConfig) -> list[tuple[str, str, int | None]]:
    out = []
    for meth in cfg.methods:
        if meth == "cbc":
            out.append(("BRC", "cbc", None))
        elif meth in ("kmeans", "fcm"):
            tag = "Kmeans-BR" if meth == "kmeans" else "FCM-BR"
            for k in cfg.clusters:
                name = tag if len(cfg.clusters) == 1 else f"{tag} (k={k})"
                out.append((name, meth, k))
        else:
            out.append(("Random", "random", None))
    return out


def _cluster(meth: str, k: int | None, m: CorrelationMatrix, train: Dataset,
             cfg: ExperimentConfig, seed: int, threads: int) -> Clustering:
    if meth == "cbc":
        return form_clusters(cbc_assign(m), train, CBC)
    if meth == "kmeans":
        return kmeans(m, k, seed, init=cfg.kmeans_init, max_iter=cfg.max_iter, threads=threads)
    return fcm(m, k, cfg.fuzzifier, seed, max_iter=cfg.max_iter, threads=threads)


def _validity(c: Clustering, m: CorrelationMatrix, conventional: bool) -> dict:
    out: dict = {"clusters": len(c.members)}
    for key, fn in (("db", db_index), ("dunn", dunn_index)) + (
        (("dunn_conventional", conventional_dunn_index),) if conventional else ()
    ):
        try:
            out[key] = fn(c, m)
        except DegenerateClusteringError as exc:
            out[key] = None
            out[f"{key}_notice"] = str(exc)
    return out


def random_recommendations(
    candidates: np.ndarray, seen: Iterable[int], k: int, seed: int
) -> list[int]:
    """Uniform sample of ``k`` distinct unseen products, seeded."""
    pool = np.setdiff1d(candidates, np.fromiter(seen, dtype=np.int64))
    if len(pool) == 0:
        return []
    rng = np.random.default_rng(seed)
    return rng.choice(pool, size=min(k, len(pool)), replace=False).tolist()


def run_experiment(
    config: ExperimentConfig, *, threads: int = 1, dataset: Dataset | None = None
) -> EvaluationReport:
    """Preprocess, cross-validate every configured method and aggregate metrics.

    ``dataset`` bypasses reading ``config.dataset`` (handy for in-memory
    fixtures).  Failures are re-raised as :class:`ExperimentError` naming the
    stage, with the completed folds attached.
    """
    cfg = config
    timings: dict[str, float] = {}
    t0 = time.perf_counter()

    def stage(name, fn, partial=None):
        t = time.perf_counter()
        try:
            return fn()
        except ExperimentError:
            raise
        except Exception as exc:
            raise ExperimentError(name, exc, partial) from exc
        finally:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - t

    raw = dataset if dataset is not None else stage(
        "load", lambda: read_dataset(cfg.dataset, header=cfg.header)
    )
    ds_info = {"raw": raw.stats.to_dict()}
    if cfg.preprocess:
        first, data = stage("preprocess", lambda: preprocess(raw, cfg.phi, cfg.tau))
        ds_info["after_phase1"] = first.stats.to_dict()
        ds_info["after_phase2"] = data.stats.to_dict()
    else:
        data = raw
    plan = stage("folds", lambda: split_folds(data, cfg.folds, cfg.seed))

    variants = _variants(cfg)
    max_k = max(cfg.top_k)
    pooled = {name: {K: [[], []] for K in cfg.top_k} for name, _, _ in variants}
    clustering_rows: list[dict] = []
    fold_rows: list[dict] = []
    excluded = {"too_few_records": 0, "empty_heldout": 0, "fully_seen": 0}
    evaluated = 0

    def partial():
        return {"config": cfg.to_dict(), "dataset": ds_info, "clustering": clustering_rows,
                "folds": fold_rows, "status": "failed"}

    for f, test_customers in enumerate(plan.folds()):
        test_set = set(test_customers)
        train = stage(
            "train_split",
            lambda: data.restrict_customers(c for c in data.customer_ids().tolist()
                                            if c not in test_set),
            partial(),
        )

        def make_splits():
            out = []
            for cust in test_customers:
                recs = data.customer_records(cust)
                if len(recs) < 2:
                    excluded["too_few_records"] += 1
                    continue
                sp_ = split_profile(recs, cfg.observed_fraction, relevance=cfg.relevance)
                if not sp_.evaluable:
                    excluded[sp_.reason] += 1
                    continue
                out.append(sp_)
            return out

        splits = stage("split_profiles", make_splits, partial())
        evaluated += len(splits)
        m = stage("correlation", lambda: correlation_matrix(train), partial())
        fold_metrics = []
        degraded: dict[str, int] = {}
        for name, meth, k in variants:
            if meth == "random":
                cands = train.product_ids()
                lists = [
                    random_recommendations(
                        cands, s.observed.product_counts, max_k,
                        _fold_seed(cfg.seed, f, s.observed.customer_id),
                    )
                    for s in splits
                ]
            else:
                seed = _fold_seed(cfg.seed, f)
                clus = stage(f"cluster:{name}",
                             lambda: _cluster(meth, k, m, train, cfg, seed, threads), partial())
                if cfg.validity:
                    row = stage(f"validity:{name}",
                                lambda: _validity(clus, m, cfg.conventional_dunn), partial())
                    clustering_rows.append({"method": name, "fold": f, **row})
                model = stage(f"train:{name}", lambda: BehaviorRecommender(train, clus),
                              partial())
                recs = stage(
                    f"recommend:{name}",
                    lambda: model.recommend_many(
                        [s.observed for s in splits], max_k,
                        include_seen=cfg.include_seen, threads=threads,
                    ),
                    partial(),
                )
                degraded[name] = sum(r.degraded for r in recs)
                lists = [r.products for r in recs]
            for K in cfg.top_k:
                ps = [precision_at_k(lst, s.heldout_relevant, K) for lst, s in zip(lists, splits)]
                rs = [recall_at_k(lst, s.heldout_relevant, K) for lst, s in zip(lists, splits)]
                pooled[name][K][0].extend(ps)
                pooled[name][K][1].extend(rs)
                fold_metrics.append(_metric_row(name, K, ps, rs))
        fold_rows.append({
            "fold": f,
            "test_customers": len(test_customers),
            "evaluated": len(splits),
            "train_customers": train.stats.customer_count,
            "degraded": degraded,
            "metrics": fold_metrics,
        })

    rec_rows = [
        _metric_row(name, K, *pooled[name][K]) for name, _, _ in variants for K in cfg.top_k
    ]
    timings["total"] = time.perf_counter() - t0
    return EvaluationReport(
        config=cfg.to_dict(),
        dataset=ds_info,
        clustering=clustering_rows,
        recommendation=rec_rows,
        folds=fold_rows,
        metadata={
            "evaluated_customers": evaluated,
            "excluded_customers": excluded,
            "fold_sizes": [len(x) for x in plan.folds()],
        },
        runtime={"threads": threads, "timings": {k: round(v, 6) for k, v in timings.items()}},
    )


def _metric_row(name: str, K: int, ps: Sequence[float], rs: Sequence[float]) -> dict:
    p = math.fsum(ps) / len(ps) if ps else 0.0
    r = math.fsum(rs) / len(rs) if rs else 0.0
    return {"method": name, "top_k": K, "customers": len(ps),
            "precision": p, "recall": r, "f_measure": f_measure(p, r)}
