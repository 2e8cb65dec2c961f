"""Command-line entry point: ``brc {stats,preprocess,cluster,recommend,evaluate}``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections.abc import Sequence

from . import __version__
from .clustering import CBC, Clustering, cbc_assign, fcm, form_clusters, kmeans
from .clustering import read_clustering, write_clustering
from .correlation import EmptyProfileError, correlation_matrix
from .data_model import CategoryConflictError, ParseError, preprocess, read_dataset, write_dataset
from .evaluation import (
    DegenerateClusteringError,
    ExperimentConfig,
    ExperimentError,
    conventional_dunn_index,
    db_index,
    dunn_index,
    run_experiment,
)
from .recommender import BehaviorProfile, BehaviorRecommender

log = logging.getLogger("brc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
THREADS_ENV = "BRC_THREADS"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _load(path: str, args) -> object:
    on_error = "skip" if getattr(args, "skip_bad_rows", False) else "raise"
    ds = read_dataset(path, on_error=on_error, header=args.header,
                      workers=getattr(args, "workers", 1))
    for err in ds.parse_errors[:20]:
        log.warning("%s: skipped %s", path, err)
    if ds.skipped > 20:
        log.warning("%s: %d more rows skipped", path, ds.skipped - 20)
    return ds


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_stats(args) -> int:
    ds = _load(args.input, args)
    out = {
        "config": {"input": args.input, "header": args.header,
                   "skip_bad_rows": args.skip_bad_rows},
        "stats": ds.stats.to_dict(),
        "skipped_rows": ds.skipped,
    }
    sys.stdout.write(_dump(out))
    return EXIT_OK


def cmd_preprocess(args) -> int:
    ds = _load(args.input, args)
    first, second = preprocess(ds, args.phi, args.tau)
    write_dataset(second, args.output)
    sidecar = args.stats_out or args.output + ".stats.json"
    _write_text(sidecar, _dump({
        "config": {"input": args.input, "output": args.output, "phi": args.phi,
                   "tau": args.tau, "header": args.header},
        "before": ds.stats.to_dict(),
        "after_phase1": first.stats.to_dict(),
        "after": second.stats.to_dict(),
        "skipped_rows": ds.skipped,
    }))
    log.info("preprocess: %d -> %d records", len(ds), len(second))
    return EXIT_OK


def _build_clustering(args, ds, m) -> Clustering:
    if args.method == "cbc":
        return form_clusters(cbc_assign(m), ds, CBC)
    if args.k is None:
        raise UsageError(f"--method {args.method} requires --k")
    if args.method == "kmeans":
        return kmeans(m, args.k, args.seed, init=args.init, max_iter=args.max_iter,
                      threads=args.threads)
    return fcm(m, args.k, args.fuzzifier, args.seed, max_iter=args.max_iter,
               threads=args.threads)


def cmd_cluster(args) -> int:
    ds = _load(args.input, args)
    m = correlation_matrix(ds)
    try:
        clus = _build_clustering(args, ds, m)
    except ValueError as exc:
        if isinstance(exc, EmptyProfileError):
            raise
        raise UsageError(str(exc)) from None
    write_clustering(clus, args.output)
    report = {
        "config": {"input": args.input, "output": args.output, "method": args.method,
                   "k": args.k, "fuzzifier": args.fuzzifier, "seed": args.seed,
                   "init": args.init, "max_iter": args.max_iter, "header": args.header},
        "method_tag": clus.method,
        "cluster_count": len(clus),
        "category_count": ds.stats.category_count,
        "notices": [],
    }
    indexes = [("db", db_index), ("dunn", dunn_index)]
    if args.conventional_dunn:
        indexes.append(("dunn_conventional", conventional_dunn_index))
    for key, fn in indexes:
        try:
            report[key] = fn(clus, m)
        except DegenerateClusteringError as exc:
            report[key] = None
            report["notices"].append(f"{key}: {exc}")
            log.warning("cluster: %s not computed: %s", key, exc)
    _write_text(args.report or args.output + ".json", _dump(report))
    return EXIT_OK


def cmd_recommend(args) -> int:
    train = _load(args.train, args)
    try:
        clus = read_clustering(args.clustering, train)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    model = BehaviorRecommender(train, clus)
    active = _load(args.active, args)
    profiles = [
        BehaviorProfile.from_records(c, active.customer_records(c))
        for c in active.customer_ids().tolist()
    ]
    recs = model.recommend_many(profiles, args.top_k, include_seen=args.include_seen,
                                threads=args.threads)
    lines = "".join(r.to_json() + "\n" for r in recs)
    meta = {"config": {"train": args.train, "clustering": args.clustering,
                       "active": args.active, "top_k": args.top_k,
                       "include_seen": args.include_seen, "method_tag": clus.method},
            "customers": len(recs), "degraded": sum(r.degraded for r in recs)}
    if args.output:
        _write_text(args.output, lines)
        _write_text(args.output + ".meta.json", _dump(meta))
    else:
        sys.stdout.write(lines)
        log.info("recommend config: %s", json.dumps(meta, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        cfg = ExperimentConfig.from_file(args.config)
        cfg = cfg.with_overrides(
            dataset=args.dataset, seed=args.seed, folds=args.folds, phi=args.phi,
            tau=args.tau, top_k=args.top_k, methods=args.methods, clusters=args.clusters,
        )
    except (OSError, ValueError) as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    out_dir = args.output_dir or os.path.dirname(os.path.abspath(args.config))
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "report.json")
    try:
        report = run_experiment(cfg, threads=args.threads)
    except ExperimentError as exc:
        if exc.partial is not None:
            exc.partial["error"] = str(exc)
            _write_text(json_path, _dump(exc.partial))
            log.error("partial results written to %s", json_path)
        raise DataError(str(exc)) from None
    # timings vary run to run, so they stay out of the data report
    _write_text(json_path, report.to_json(include_runtime=False))
    _write_text(os.path.join(out_dir, "runtime.json"), _dump(report.runtime))
    _write_text(os.path.join(out_dir, "report.txt"), report.to_table())
    sys.stdout.write(report.to_table())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive, default=None,
                        help=f"worker threads (default: ${THREADS_ENV} or CPU count)")
    common.add_argument("--header", action="store_true",
                        help="input CSV files start with a header row naming the columns")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="brc", description="Behavior-based recommendation with category-based clustering.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("stats", parents=[common], help="dataset statistics as JSON")
    s.add_argument("input")
    s.add_argument("--skip-bad-rows", action="store_true")
    s.add_argument("--workers", type=_positive, default=1,
                   help="processes used to parse the file")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("preprocess", parents=[common], help="two-phase filtering")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--phi", type=_positive, default=1000)
    s.add_argument("--tau", type=_positive, default=50)
    s.add_argument("--stats-out", help="sidecar path (default: OUTPUT.stats.json)")
    s.add_argument("--skip-bad-rows", action="store_true")
    s.add_argument("--workers", type=_positive, default=1)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("cluster", parents=[common], help="cluster customers")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--method", choices=("cbc", "kmeans", "fcm"), default="cbc")
    s.add_argument("--k", type=_positive)
    s.add_argument("--fuzzifier", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--init", choices=("random", "k-means++"), default="random")
    s.add_argument("--max-iter", type=_positive, default=100)
    s.add_argument("--conventional-dunn", action="store_true")
    s.add_argument("--report", help="validity report path (default: OUTPUT.json)")
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("recommend", parents=[common], help="top-K recommendations")
    s.add_argument("train")
    s.add_argument("clustering")
    s.add_argument("active")
    s.add_argument("--top-k", type=_positive, default=10)
    s.add_argument("--include-seen", action="store_true")
    s.add_argument("--output", "-o", help="JSON-lines output (default: stdout)")
    s.set_defaults(func=cmd_recommend)

    s = sub.add_parser("evaluate", parents=[common], help="cross-validated experiment")
    s.add_argument("config")
    s.add_argument("--output-dir")
    s.add_argument("--dataset")
    s.add_argument("--seed", type=int)
    s.add_argument("--folds", type=int)
    s.add_argument("--phi", type=_positive)
    s.add_argument("--tau", type=_positive)
    s.add_argument("--top-k", help="comma-separated list, e.g. 1,3,6")
    s.add_argument("--methods", help="comma-separated subset of cbc,kmeans,fcm,random")
    s.add_argument("--clusters", help="comma-separated cluster counts for kmeans/fcm")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        if args.threads is None:
            args.threads = _default_threads()
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        log.error("cannot read %s: %s", exc.filename, exc.strerror)
        return EXIT_DATA
    except (OSError, ParseError, CategoryConflictError, EmptyProfileError,
            UnicodeDecodeError, DataError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except Exception:  # noqa: BLE001
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
