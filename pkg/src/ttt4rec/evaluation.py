"""Sampled ranking evaluation: the positive against 99 negatives, NDCG@K and HR@K."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Trace
from .data import EVAL_STREAM, Example, Split, sample_negatives, stream
from .model import ModelConfig, ModelParams, candidate_scores, pad_sequences

EVAL_NEGATIVES = 99
CUTOFFS = (5, 10)
METRIC_COLUMNS = ("ndcg5", "ndcg10", "hr5", "hr10")


@dataclass(frozen=True)
class RankingResult:
    instance: int
    rank: int
    scores: np.ndarray | None = None


@dataclass(frozen=True)
class MetricsReport:
    ndcg5: float
    ndcg10: float
    hr5: float
    hr10: float
    count: int

    def to_dict(self) -> dict:
        return asdict(self)

    def row(self) -> list[float]:
        return [self.ndcg5, self.ndcg10, self.hr5, self.hr10]


def ndcg_at_k(rank: int, k: int) -> float:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def hr_at_k(rank: int, k: int) -> float:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1.0 if rank <= k else 0.0


def rank_of_positive(scores: np.ndarray) -> np.ndarray:
    """1-based rank of column 0 among each row of ``scores``.

    Ties count against the positive.
    """
    scores = np.atleast_2d(scores)
    return 1 + (scores[:, 1:] >= scores[:, :1]).sum(axis=1)


def rank_candidates(params: ModelParams, config: ModelConfig, history: Sequence[int],
                    positive: int, negatives: Sequence[int], instance: int = 0,
                    keep_scores: bool = False) -> RankingResult:
    candidates = [positive, *negatives]
    if len(set(candidates)) != len(candidates):
        raise ValueError("duplicate candidates")
    if set(candidates) & set(history):
        raise ValueError("candidates must not overlap the history")
    tr = Trace(params.embedding.dtype)
    v = {k: tr.const(a) for k, a in params.as_dict().items()}
    seqs = pad_sequences([history], config.max_seq_len)
    scores = candidate_scores(v, seqs, np.asarray([candidates]), config).value[0]
    return RankingResult(instance, int(rank_of_positive(scores)[0]), scores if keep_scores else None)


def eval_candidates(test: Sequence[Example], user_items, vocab_size: int, seed: int,
                    n_negatives: int = EVAL_NEGATIVES) -> np.ndarray:
    """(n, 1 + n_negatives) candidate ids, positive first.

    Negatives depend only on (seed, user), so every epoch sees the same ones.
    """
    out = np.empty((len(test), 1 + n_negatives), dtype=np.int64)
    for i, ex in enumerate(test):
        excluded = set(user_items[ex.user]) | {ex.positive}
        out[i, 0] = ex.positive
        out[i, 1:] = sample_negatives(excluded, n_negatives, vocab_size, stream(seed, EVAL_STREAM, ex.user))
    return out


def model_scorer(params: ModelParams, config: ModelConfig, batch_size: int = 256) -> Callable:
    def scorer(histories: Sequence[Sequence[int]], candidates: np.ndarray) -> np.ndarray:
        out = np.empty(candidates.shape, dtype=np.float64)
        for lo in range(0, len(histories), batch_size):
            hi = lo + batch_size
            tr = Trace(params.embedding.dtype)
            v = {k: tr.const(a) for k, a in params.as_dict().items()}
            seqs = pad_sequences(histories[lo:hi], config.max_seq_len)
            out[lo:hi] = candidate_scores(v, seqs, candidates[lo:hi], config).value
        return out
    return scorer


def report_from_ranks(ranks: Sequence[int]) -> MetricsReport:
    ranks = list(ranks)
    if not ranks:
        raise ValueError("no ranks to aggregate")
    n = len(ranks)
    # math.fsum keeps the mean independent of accumulation order
    return MetricsReport(
        ndcg5=math.fsum(ndcg_at_k(r, 5) for r in ranks) / n,
        ndcg10=math.fsum(ndcg_at_k(r, 10) for r in ranks) / n,
        hr5=math.fsum(hr_at_k(r, 5) for r in ranks) / n,
        hr10=math.fsum(hr_at_k(r, 10) for r in ranks) / n,
        count=n,
    )


def evaluate_scorer(scorer: Callable, test: Sequence[Example], user_items, vocab_size: int,
                    seed: int) -> tuple[MetricsReport, np.ndarray]:
    """Rank every test positive among its sampled negatives with ``scorer``.

    ``scorer(histories, candidates)`` returns a score array shaped like
    ``candidates``.
    """
    if not test:
        raise ValueError("empty test set")
    cands = eval_candidates(test, user_items, vocab_size, seed)
    scores = np.asarray(scorer([ex.history for ex in test], cands))
    ranks = rank_of_positive(scores)
    return report_from_ranks(ranks.tolist()), ranks


def evaluate(params: ModelParams, config: ModelConfig, split: Split, seed: int) -> MetricsReport:
    if params.vocab_size != split.vocab_size:
        raise ValueError(f"model vocab size {params.vocab_size} != dataset vocab size {split.vocab_size}")
    report, _ = evaluate_scorer(model_scorer(params, config), split.test, split.user_items,
                                split.vocab_size, seed)
    return report
