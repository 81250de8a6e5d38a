"""Interaction logs, chronological sequences, leave-one-out splits and
negative sampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

CACHE_FORMAT = "ttt4rec-dataset"
CACHE_VERSION = 1
MAX_MALFORMED_FRACTION = 0.01
DEFAULT_MAX_SEQ_LEN = {"amazon": 50, "movielens": 200}

# rng stream tags
TRAIN_STREAM = 1
EVAL_STREAM = 2
SHUFFLE_STREAM = 3


class ParseError(ValueError):
    pass


@dataclass
class InteractionLog:
    """Raw records in file order with densified ids (0 is never assigned)."""

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    user_ids: list[str]
    item_ids: list[str]
    malformed: list[tuple[int, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.users)

    def records(self) -> list[tuple[str, str, float, int]]:
        """Records with the original ids, in file order."""
        return [
            (self.user_ids[u - 1], self.item_ids[i - 1], float(r), int(t))
            for u, i, r, t in zip(self.users, self.items, self.ratings, self.timestamps)
        ]


def _densify(keys: Iterable[str]) -> tuple[np.ndarray, list[str]]:
    mapping: dict[str, int] = {}
    dense = [mapping.setdefault(k, len(mapping) + 1) for k in keys]
    return np.array(dense, dtype=np.int64), list(mapping)


def _parse_lines(path, split, expected: int, fmt: str) -> InteractionLog:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    rows, bad = [], []
    total = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        total += 1
        parts = split(line.strip())
        try:
            if len(parts) != expected:
                raise ValueError
            user, item = parts[0].strip(), parts[1].strip()
            rating = float(parts[2])
            ts = int(float(parts[3]))
            if not user or not item or not np.isfinite(rating):
                raise ValueError
        except ValueError:
            bad.append((lineno, line))
            continue
        rows.append((user, item, rating, ts))
    if total == 0:
        raise ParseError(f"{path} contains no records")
    if len(bad) > MAX_MALFORMED_FRACTION * total:
        sample = "; ".join(f"line {n}: {l[:80]!r}" for n, l in bad[:3])
        raise ParseError(
            f"{len(bad)} of {total} lines in {path} are not valid {fmt} records (e.g. {sample})"
        )
    for lineno, line in bad:
        log.warning("%s:%d: skipped malformed line %r", path, lineno, line[:80])
    users, user_ids = _densify(r[0] for r in rows)
    items, item_ids = _densify(r[1] for r in rows)
    return InteractionLog(
        users=users,
        items=items,
        ratings=np.array([r[2] for r in rows], dtype=np.float64),
        timestamps=np.array([r[3] for r in rows], dtype=np.int64),
        user_ids=user_ids,
        item_ids=item_ids,
        malformed=bad,
    )


def parse_movielens(path) -> InteractionLog:
    """``UserID::MovieID::Rating::Timestamp`` lines (ML-1M ratings.dat)."""
    return _parse_lines(path, lambda s: s.split("::"), 4, "movielens")


def parse_amazon(path) -> InteractionLog:
    """``user,item,rating,timestamp`` lines (Amazon ratings-only CSV)."""
    return _parse_lines(path, lambda s: s.split(","), 4, "amazon")


PARSERS = {"movielens": parse_movielens, "amazon": parse_amazon}


@dataclass
class Dataset:
    user_ids: list[str]
    sequences: list[list[int]]
    timestamps: list[list[int]]
    item_ids: list[str]
    max_seq_len: int

    @property
    def vocab_size(self) -> int:
        return len(self.item_ids)

    @property
    def num_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def summary(self) -> dict:
        n_users, n_items = len(self.sequences), self.vocab_size
        n = self.num_interactions
        return {
            "users": n_users,
            "items": n_items,
            "interactions": n,
            "density": n / (n_users * n_items) if n_users and n_items else 0.0,
        }


def build_sequences(log: InteractionLog, min_interactions: int = 5, max_seq_len: int = 50) -> Dataset:
    """Per-user chronological sequences (ties keep file order).

    Users with fewer than ``min_interactions`` records are dropped and item
    ids are re-densified over the surviving users.
    """
    if max_seq_len < 2:
        raise ValueError("max_seq_len must be >= 2")
    # lexsort: last key is primary -> (user, timestamp, file position)
    order = np.lexsort((np.arange(len(log)), log.timestamps, log.users))
    users = log.users[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    kept = []
    for chunk in np.split(order, bounds):
        if len(chunk) == 0 or len(chunk) < max(min_interactions, 2):
            continue
        kept.append(chunk)
    if not kept:
        raise ValueError("no user has enough interactions")
    # first-appearance order of surviving items in file order keeps ids stable
    keep_rows = np.sort(np.concatenate(kept))
    remap: dict[int, int] = {}
    for it in log.items[keep_rows]:
        if it not in remap:
            remap[int(it)] = len(remap) + 1
    item_ids = [None] * len(remap)
    for old, new in remap.items():
        item_ids[new - 1] = log.item_ids[old - 1]
    kept.sort(key=lambda c: int(log.users[c[0]]))
    return Dataset(
        user_ids=[log.user_ids[int(log.users[c[0]]) - 1] for c in kept],
        sequences=[[remap[int(i)] for i in log.items[c]] for c in kept],
        timestamps=[[int(t) for t in log.timestamps[c]] for c in kept],
        item_ids=item_ids,
        max_seq_len=max_seq_len,
    )


def save_dataset(dataset: Dataset, path) -> None:
    """Line-delimited JSON: a version header, then one record per user."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "max_seq_len": dataset.max_seq_len,
        "vocab_size": dataset.vocab_size,
        "item_ids": dataset.item_ids,
    }
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for user, seq, ts in zip(dataset.user_ids, dataset.sequences, dataset.timestamps):
            fh.write(json.dumps({"user": user, "items": seq, "timestamps": ts}, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path} is not a dataset cache") from exc
        if header.get("format") != CACHE_FORMAT:
            raise ValueError(f"{path} is not a dataset cache")
        if header.get("version") != CACHE_VERSION:
            raise ValueError(f"unsupported dataset cache version {header.get('version')}")
        users, seqs, stamps = [], [], []
        for line in fh:
            rec = json.loads(line)
            users.append(rec["user"])
            seqs.append(rec["items"])
            stamps.append(rec["timestamps"])
    ds = Dataset(users, seqs, stamps, header["item_ids"], header["max_seq_len"])
    if ds.vocab_size != header["vocab_size"]:
        raise ValueError("dataset cache is inconsistent: vocab size mismatch")
    return ds


@dataclass(frozen=True)
class Example:
    """A positive target with the history that precedes it."""

    user: int
    history: tuple[int, ...]
    positive: int


@dataclass
class Split:
    train: list[Example]
    test: list[Example]
    user_items: list[frozenset]
    vocab_size: int
    max_seq_len: int


def split_leave_one_out(dataset: Dataset, train_targets: str = "last") -> Split:
    """Hold out each user's last item for testing.

    ``train_targets="last"`` trains on the second-to-last item only;
    ``"all"`` uses every position from the second item up to it.
    """
    if train_targets not in ("last", "all"):
        raise ValueError("train_targets must be 'last' or 'all'")
    train, test, seen = [], [], []
    for u, seq in enumerate(dataset.sequences):
        if len(seq) < 2:
            raise ValueError(f"user {dataset.user_ids[u]} has fewer than 2 interactions")
        seen.append(frozenset(seq))
        test.append(Example(u, tuple(seq[:-1]), seq[-1]))
        if len(seq) < 3:
            # the only candidate target is the held-out item
            continue
        positions = range(1, len(seq) - 1) if train_targets == "all" else [len(seq) - 2]
        for t in positions:
            train.append(Example(u, tuple(seq[:t]), seq[t]))
    return Split(train, test, seen, dataset.vocab_size, dataset.max_seq_len)


def sample_negatives(excluded, k: int, vocab_size: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` distinct ids drawn uniformly from ``1..vocab_size`` minus ``excluded``."""
    excluded = {int(i) for i in excluded if 1 <= int(i) <= vocab_size}
    available = vocab_size - len(excluded)
    if available < k:
        raise ValueError(f"cannot draw {k} negatives: only {available} items outside the excluded set")
    if len(excluded) > vocab_size // 2:
        pool = np.setdiff1d(np.arange(1, vocab_size + 1), np.fromiter(excluded, dtype=np.int64))
        return rng.choice(pool, size=k, replace=False)
    out: list[int] = []
    taken = set(excluded)
    while len(out) < k:
        for c in rng.integers(1, vocab_size + 1, size=2 * (k - len(out)) + 4):
            c = int(c)
            if c not in taken:
                taken.add(c)
                out.append(c)
                if len(out) == k:
                    break
    return np.array(out, dtype=np.int64)


def stream(seed: int, tag: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, tag, keys...), independent of scheduling."""
    return np.random.default_rng([int(seed), int(tag), *map(int, keys)])
