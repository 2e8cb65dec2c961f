"""Synthetic clickstreams with planted category-preference groups.

Each group favours one category: a fixed share of every member's events land
on that category's products, drawn from a skewed per-group popularity curve.
The remaining events scatter uniformly over the other categories, so every
member's largest category share is its group's category by construction.

    python -m brc.synthetic out.csv --groups 4 --per-group 10 --seed 0
"""

from __future__ import annotations

import argparse

import numpy as np

from .data_model import BehaviorType, Dataset, write_dataset

BEHAVIOR_MIX = {
    BehaviorType.PV: 0.80, BehaviorType.FAV: 0.05,
    BehaviorType.CART: 0.08, BehaviorType.BUY: 0.07,
}


def planted_dataset(
    n_groups: int = 4,
    per_group: int = 10,
    *,
    products_per_category: int = 25,
    noise_categories: int = 4,
    events: tuple[int, int] = (50, 120),
    focus: float = 0.75,
    skew: float = 1.2,
    seed: int = 0,
) -> tuple[Dataset, dict[int, int]]:
    """Return the dataset and the planted ``customer -> category`` truth."""
    if not 0.5 < focus <= 1:
        raise ValueError("focus must exceed one half so the planted category dominates")
    rng = np.random.default_rng(seed)
    n_cat = n_groups + noise_categories
    cat_ids = 100 + np.arange(n_cat)
    products = {
        int(c): c * 1000 + np.arange(products_per_category) for c in cat_ids
    }
    ranks = np.arange(1, products_per_category + 1, dtype=float) ** -skew
    popularity = {}
    for g in range(n_groups):
        w = ranks[rng.permutation(products_per_category)]
        popularity[g] = w / w.sum()
    kinds = np.array(list(BEHAVIOR_MIX), dtype=np.int8)
    mix = np.array(list(BEHAVIOR_MIX.values()))

    cols: dict[str, list] = {k: [] for k in "cpkbt"}
    truth: dict[int, int] = {}
    for i in range(n_groups * per_group):
        cust, g = i + 1, i % n_groups
        home = int(cat_ids[g])
        truth[cust] = home
        n = int(rng.integers(events[0], events[1] + 1))
        n_home = int(round(focus * n))
        home_items = rng.choice(products[home], size=n_home, p=popularity[g])
        others = np.setdiff1d(cat_ids, [home])
        away_cats = rng.choice(others, size=n - n_home)
        away_items = np.array(
            [rng.choice(products[int(c)]) for c in away_cats], dtype=np.int64
        )
        items = np.concatenate([home_items, away_items])
        cats = np.concatenate([np.full(n_home, home), away_cats])
        order = rng.permutation(n)
        ts = 1_511_000_000 + np.sort(rng.integers(0, 9 * 86_400, size=n))
        cols["c"].append(np.full(n, cust))
        cols["p"].append(items[order])
        cols["k"].append(cats[order])
        cols["b"].append(rng.choice(kinds, size=n, p=mix))
        cols["t"].append(ts)
    if not cols["c"]:
        return Dataset(), truth
    ds = Dataset(*(np.concatenate(cols[k]) for k in "cpkbt"))
    return ds, truth


def main(argv=None) -> None:
    p = argparse.ArgumentParser(prog="python -m brc.synthetic", description=__doc__.split("\n")[0])
    p.add_argument("output")
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--per-group", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    ds, _ = planted_dataset(args.groups, args.per_group, seed=args.seed)
    write_dataset(ds, args.output)


if __name__ == "__main__":
    main()
