"""Outer-loop training through the unrolled TTT inner loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Trace
from .checkpoint import save_checkpoint
from .data import SHUFFLE_STREAM, TRAIN_STREAM, Split, sample_negatives, stream
from .evaluation import METRIC_COLUMNS, MetricsReport, evaluate
from .model import ModelConfig, ModelParams, grouped_loss, init_params, pad_sequences

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "train_loss") + METRIC_COLUMNS + ("seconds",)
TRAIN_NEGATIVES = 4
PRECISIONS = {"float32": np.float32, "float64": np.float64}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    epochs: int = 10
    batch_size: int = 256
    seed: int = 0
    eval_every_epoch: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    precision: str = "float32"
    train_targets: str = "last"
    timing: bool = False

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    seconds: float
    metrics: MetricsReport | None = None

    def row(self, timing: bool = False) -> dict:
        row = {"epoch": self.epoch, "train_loss": self.train_loss}
        row.update(self.metrics.to_dict() if self.metrics else {})
        row.pop("count", None)
        row["seconds"] = self.seconds if timing else ""
        return row


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam.  Returns new parameter and state objects."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        new_m[name], new_v[name] = m.astype(p.dtype), v.astype(p.dtype)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[name] = (p - update).astype(p.dtype)
    return new_p, OptimizerState(new_m, new_v, step)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total <= max_norm:
        return grads
    factor = max_norm / (total + 1e-12)
    return {k: g * g.dtype.type(factor) for k, g in grads.items()}


def build_batch(examples, split: Split, seed: int, epoch: int, indices, max_len: int,
                n_negatives: int = TRAIN_NEGATIVES):
    """Sequences plus flattened (1 positive + n negatives) candidates per example."""
    per = 1 + n_negatives
    cands = np.empty((len(indices), per), dtype=np.int64)
    for row, i in enumerate(indices):
        ex = examples[i]
        excluded = set(split.user_items[ex.user]) | {ex.positive}
        cands[row, 0] = ex.positive
        cands[row, 1:] = sample_negatives(excluded, n_negatives, split.vocab_size,
                                          stream(seed, TRAIN_STREAM, epoch, i))
    labels = np.zeros_like(cands)
    labels[:, 0] = 1
    seqs = pad_sequences([examples[i].history for i in indices], max_len)
    seq_index = np.repeat(np.arange(len(indices)), per)
    return seqs, seq_index, cands.reshape(-1), labels.reshape(-1)


def train_epoch(params: ModelParams, state: OptimizerState, split: Split, model_config: ModelConfig,
                config: TrainConfig, epoch: int) -> tuple[ModelParams, OptimizerState, EpochStats]:
    """One shuffled pass over the training examples.

    ``batch_size`` counts instances (candidate rows); each example contributes
    one positive and four sampled negatives, so a batch holds
    ``batch_size // 5`` examples.
    """
    examples = split.train
    if not examples:
        raise ValueError("empty training set")
    start = time.perf_counter()
    per_batch = max(1, config.batch_size // (1 + TRAIN_NEGATIVES))
    order = stream(config.seed, SHUFFLE_STREAM, epoch).permutation(len(examples))
    values = {k: a.astype(config.dtype) for k, a in params.as_dict().items()}
    losses = []
    for b, lo in enumerate(range(0, len(order), per_batch)):
        idx = order[lo:lo + per_batch]
        seqs, seq_index, cands, labels = build_batch(examples, split, config.seed, epoch, idx,
                                                     model_config.max_seq_len)
        tr = Trace(config.dtype)
        leaves = {k: tr.leaf(a, name=k) for k, a in values.items()}
        loss = grouped_loss(leaves, seqs, seq_index, cands, labels, model_config)
        lval = float(loss.value)
        if not math.isfinite(lval):
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
        grads = tr.grad(loss, leaves)
        grads["embedding"][0] = 0.0
        if config.max_grad_norm is not None:
            grads = _clip(grads, config.max_grad_norm)
        values, state = adam_step(values, grads, state, config.lr, config.beta1, config.beta2, config.eps)
        losses.append(lval * len(idx))
    mean_loss = math.fsum(losses) / len(examples)
    return ModelParams.from_dict(values), state, EpochStats(epoch, mean_loss, time.perf_counter() - start)


@dataclass
class TrainResult:
    params: ModelParams
    stats: list[EpochStats]
    checkpoints: list[Path] = field(default_factory=list)
    initial_metrics: MetricsReport | None = None


def _fmt(x):
    return "" if x == "" else repr(float(x)) if isinstance(x, float) else str(x)


def write_metric_rows(stats: list[EpochStats], out_dir: Path, timing: bool = False) -> tuple[Path, Path]:
    """Per-epoch rows as CSV and as JSON lines."""
    csv_path, jsonl_path = out_dir / "metrics.csv", out_dir / "metrics.jsonl"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for s in stats:
            row = s.row(timing)
            writer.writerow([_fmt(row.get(c, "")) for c in CSV_COLUMNS])
    with jsonl_path.open("w", encoding="utf-8", newline="\n") as fh:
        for s in stats:
            row = s.row(timing)
            if not timing:
                row.pop("seconds")
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return csv_path, jsonl_path


def train(config: TrainConfig, model_config: ModelConfig, split: Split, out_dir=None,
          params: ModelParams | None = None, eval_seed: int | None = None) -> TrainResult:
    """Run ``config.epochs`` epochs, evaluating and checkpointing after each.

    With ``out_dir`` set, writes ``checkpoints/epoch_NNN.ckpt``, ``final.ckpt``,
    ``metrics.csv`` and ``metrics.jsonl`` there.
    """
    if config.epochs < 1:
        raise ValueError("epochs must be >= 1")
    if model_config.vocab_size != split.vocab_size:
        raise ValueError(f"model vocab size {model_config.vocab_size} != dataset vocab size {split.vocab_size}")
    eval_seed = config.seed if eval_seed is None else eval_seed
    if params is None:
        params = init_params(model_config, config.seed)
    params = params.astype(config.dtype)
    state = OptimizerState.zeros_like(params.as_dict())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    result = TrainResult(params, [])
    for epoch in range(1, config.epochs + 1):
        params, state, stats = train_epoch(params, state, split, model_config, config, epoch)
        if config.eval_every_epoch or epoch == config.epochs:
            stats.metrics = evaluate(params, model_config, split, eval_seed)
        result.stats.append(stats)
        msg = f"epoch {epoch}: loss {stats.train_loss:.4f}"
        if stats.metrics:
            m = stats.metrics
            msg += f" ndcg@5 {m.ndcg5:.4f} ndcg@10 {m.ndcg10:.4f} hr@5 {m.hr5:.4f} hr@10 {m.hr10:.4f}"
        log.info("%s (%.1fs)", msg, stats.seconds)
        if out is not None:
            ckpt = save_checkpoint(out / "checkpoints" / f"epoch_{epoch:03d}.ckpt", params, model_config,
                                   {"epoch": epoch, "seed": config.seed})
            result.checkpoints.append(ckpt)
            write_metric_rows(result.stats, out, config.timing)
    result.params = params
    if out is not None:
        save_checkpoint(out / "final.ckpt", params, model_config, {"epoch": config.epochs, "seed": config.seed})
    return result
