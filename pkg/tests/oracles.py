"""Brute-force reference implementations over raw record tuples.

Records here are plain ``(customer, product, category, behavior, timestamp)``
tuples with the behavior as an int.  Nothing in this module imports the
package; every quantity is recomputed with nested loops.
"""

import math
from fractions import Fraction


def customers_of(records):
    return sorted({r[0] for r in records})


def categories_of(records):
    return sorted({r[2] for r in records})


def record_count(records, c):
    n = 0
    for r in records:
        if r[0] == c:
            n += 1
    return n


def cooperation(records, c, cat):
    n = 0
    for r in records:
        if r[0] == c and r[2] == cat:
            n += 1
    return n


def correlation(records, c, cat):
    return cooperation(records, c, cat) / record_count(records, c)


def cbc_labels(records):
    """Running-max scan over categories in ascending id order (strict >)."""
    labels = {}
    cats = categories_of(records)
    for c in customers_of(records):
        best, label = 0.0, None
        for cat in cats:
            v = correlation(records, c, cat)
            if v > best:
                best, label = v, cat
        labels[c] = label
    return labels


def max_cb(records, labels, label):
    best = 0
    for c, lab in labels.items():
        if lab == label:
            best = max(best, record_count(records, c))
    return best


def delta(max_count, active_count):
    return int(math.floor(0.5 * (max_count + active_count)))


def neighborhood(records, labels, label, active_id, active_count):
    d = delta(max_cb(records, labels, label), active_count)
    out = set()
    for c, lab in labels.items():
        if lab == label and c != active_id and record_count(records, c) >= d:
            out.add(c)
    return out


def pair_set(records):
    return {(r[1], r[3]) for r in records}


def jaccard(records_a, records_b):
    a, b = pair_set(records_a), pair_set(records_b)
    return len(a & b) / len(a | b)


def jaccard_exact(records_a, records_b):
    a, b = pair_set(records_a), pair_set(records_b)
    return Fraction(len(a & b), len(a | b))


def own(records, c):
    return [r for r in records if r[0] == c]


def similar(records, members, active_records):
    """Returns ``(sorted [(customer, float sim)], float theta)``."""
    if not members:
        return [], float("nan")
    exact = {c: jaccard_exact(active_records, own(records, c)) for c in sorted(members)}
    theta = sum(exact.values(), Fraction(0)) / len(exact)
    kept = [(c, s.numerator / s.denominator) for c, s in exact.items() if s >= theta]
    return kept, float(theta)


def product_event_count(records, c, p):
    n = 0
    for r in records:
        if r[0] == c and r[1] == p:
            n += 1
    return n


def reputation(records, sim_entries, p):
    total = 0.0
    for c, s in sim_entries:
        total += product_event_count(records, c, p) * s
    return total


def active_label(train, labels, active_records):
    """Argmax correlation over categories that label a training cluster."""
    cats = sorted(set(labels.values()))
    n = len(active_records)
    best, label = 0.0, None
    for cat in cats:
        v = sum(1 for r in active_records if r[2] == cat) / n
        if v > best:
            best, label = v, cat
    return label


def pipeline(train, active_records, k, include_seen=False):
    """Full recommendation pipeline by nested loops.

    Returns ``(cluster_label, degraded, [(product, score), ...])``.
    """
    labels = cbc_labels(train)
    active_id = active_records[0][0]
    seen = {r[1] for r in active_records}
    all_products = sorted({r[1] for r in train})

    def top(scores):
        rows = [(p, v) for p, v in scores.items() if v > 0 and (include_seen or p not in seen)]
        rows.sort(key=lambda pv: (-pv[1], pv[0]))
        return rows[:k]

    label = active_label(train, labels, active_records)
    if label is None:
        pop = {p: float(sum(1 for r in train if r[1] == p)) for p in all_products}
        return None, True, top(pop)
    hood = neighborhood(train, labels, label, active_id, len(active_records))
    entries, _ = similar(train, hood, active_records)
    if not any(s > 0 for _, s in entries):
        members = [c for c, lab in labels.items() if lab == label]
        pop = {p: float(sum(1 for r in train if r[1] == p and r[0] in members))
               for p in all_products}
        return label, True, top(pop)
    scores = {p: reputation(train, entries, p) for p in all_products}
    return label, False, top(scores)


# -- cluster geometry --------------------------------------------------------


def _centroid(points):
    dim = len(points[0])
    return [sum(p[j] for p in points) / len(points) for j in range(dim)]


def _dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def _groups(points, labels):
    out = {}
    for x, lab in zip(points, labels):
        out.setdefault(lab, []).append(x)
    return [out[k] for k in sorted(out)]


def db_index(points, labels):
    groups = _groups(points, labels)
    cents = [_centroid(g) for g in groups]
    disp = [sum(_dist(x, c) for x in g) / len(g) for g, c in zip(groups, cents)]
    total = 0.0
    for i in range(len(groups)):
        worst = -math.inf
        for j in range(len(groups)):
            if i != j:
                worst = max(worst, (disp[i] + disp[j]) / _dist(cents[i], cents[j]))
        total += worst
    return total / len(groups)


def dunn_index(points, labels):
    groups = _groups(points, labels)
    cents = [_centroid(g) for g in groups]
    disp = [sum(_dist(x, c) for x in g) / len(g) for g, c in zip(groups, cents)]
    sep = 0.0
    for i in range(len(groups)):
        for j in range(len(groups)):
            if i != j:
                sep = max(sep, _dist(cents[i], cents[j]))
    return sep / min(disp)


def conventional_dunn(points, labels):
    groups = _groups(points, labels)
    diam = 0.0
    for g in groups:
        for a in g:
            for b in g:
                diam = max(diam, _dist(a, b))
    sep = math.inf
    for i, gi in enumerate(groups):
        for j, gj in enumerate(groups):
            if i != j:
                for a in gi:
                    for b in gj:
                        sep = min(sep, _dist(a, b))
    return sep / diam
