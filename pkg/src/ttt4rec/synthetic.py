"""Synthetic interaction logs with a planted next-item rule.

Each user walks a successor chain ``i -> i % n_items + 1`` from a random start,
so the ideal recommender always ranks the successor of the last click first.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import InteractionLog


def successor(item: int, n_items: int) -> int:
    return item % n_items + 1


def planted_pattern_log(n_items: int = 500, n_users: int = 2000, min_len: int = 5, max_len: int = 20,
                        seed: int = 0) -> InteractionLog:
    if not 2 <= min_len <= max_len <= n_items:
        raise ValueError("need 2 <= min_len <= max_len <= n_items")
    rng = np.random.default_rng(seed)
    users, items, stamps = [], [], []
    for u in range(1, n_users + 1):
        length = int(rng.integers(min_len, max_len + 1))
        item = int(rng.integers(1, n_items + 1))
        t0 = int(rng.integers(1_000_000_000, 1_100_000_000))
        for step in range(length):
            users.append(u)
            items.append(item)
            stamps.append(t0 + 60 * step)
            item = successor(item, n_items)
    users_a = np.array(users, dtype=np.int64)
    # dense ids equal the original item ids
    return InteractionLog(
        users=users_a,
        items=np.array(items, dtype=np.int64),
        ratings=np.full(len(users), 5.0),
        timestamps=np.array(stamps, dtype=np.int64),
        user_ids=[str(u) for u in range(1, n_users + 1)],
        item_ids=[str(i) for i in range(1, n_items + 1)],
    )


def write_movielens(log: InteractionLog, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for user, item, rating, ts in log.records():
            fh.write(f"{user}::{item}::{int(rating)}::{ts}\n")
    return path
