"""TTT4Rec: shared item embeddings, a TTT-Linear sequence encoder and an MLP
target tower, scored by a dot product."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Trace, Var
from .ttt import TTT_PARAM_NAMES, TTTConfig, TTTParams, ttt_scan

PARAM_NAMES = ("embedding",) + TTT_PARAM_NAMES + ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")
NON_TTT_STD = 0.02
RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    mlp_hidden: int | None = None
    max_seq_len: int = 50
    inner_lr: float = 1.0
    mini_batch_size: int = 1
    initializer_range: float = 0.1

    def __post_init__(self):
        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", 2 * self.embed_dim)
        for name in ("vocab_size", "embed_dim", "mlp_hidden", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        self.ttt  # validates the layer settings

    @property
    def ttt(self) -> TTTConfig:
        return TTTConfig(self.embed_dim, self.inner_lr, self.mini_batch_size, self.initializer_range)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    embedding: np.ndarray
    ttt: TTTParams
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding}
        out.update(self.ttt.as_dict())
        out.update(mlp_w1=self.mlp_w1, mlp_b1=self.mlp_b1, mlp_w2=self.mlp_w2, mlp_b2=self.mlp_b2)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "ModelParams":
        missing = set(PARAM_NAMES) - set(d)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        return cls(
            embedding=d["embedding"],
            ttt=TTTParams(**{k: d[k] for k in TTT_PARAM_NAMES}),
            mlp_w1=d["mlp_w1"], mlp_b1=d["mlp_b1"], mlp_w2=d["mlp_w2"], mlp_b2=d["mlp_b2"],
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams.from_dict({k: v.astype(dtype) for k, v in self.as_dict().items()})

    def copy(self) -> "ModelParams":
        return ModelParams.from_dict({k: v.copy() for k, v in self.as_dict().items()})

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0] - 1

    def leaves(self, trace: Trace) -> dict[str, Var]:
        return {k: trace.leaf(v, name=k) for k, v in self.as_dict().items()}


@dataclass(frozen=True)
class Instance:
    user: int
    candidate: int
    sequence: tuple[int, ...]
    label: int

    def __post_init__(self):
        if self.candidate < 1:
            raise ValueError("candidate id must be >= 1")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if not any(self.sequence):
            raise ValueError("sequence has no valid item")


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    k, h = config.embed_dim, config.mlp_hidden
    embedding = rng.normal(0.0, NON_TTT_STD, (config.vocab_size + 1, k))
    embedding[0] = 0.0
    ttt = TTTParams.init(config.ttt, rng)
    return ModelParams(
        embedding=embedding,
        ttt=ttt,
        mlp_w1=rng.normal(0.0, NON_TTT_STD, (k, h)),
        mlp_b1=np.zeros(h),
        mlp_w2=rng.normal(0.0, NON_TTT_STD, (h, k)),
        mlp_b2=np.zeros(k),
    )


# -- traced model pieces -------------------------------------------------------

def pad_sequences(sequences: Sequence[Sequence[int]], max_len: int) -> np.ndarray:
    """Left-pad with 0 (keeping the most recent ``max_len`` items)."""
    out = np.zeros((len(sequences), max_len), dtype=np.int64)
    for i, seq in enumerate(sequences):
        seq = list(seq)[-max_len:]
        if seq:
            out[i, max_len - len(seq):] = seq
    return out


def compact_valid(ids: np.ndarray) -> np.ndarray:
    """Move the valid (nonzero) ids of each row to the front, preserving order,
    and drop columns that are padding in every row.

    The layer then sees each sequence starting at position 0 regardless of how
    much padding surrounded it, so mini-batch boundaries and the final output
    are unaffected by padding.
    """
    ids = np.asarray(ids)
    order = np.argsort(ids == 0, axis=1, kind="stable")
    packed = np.take_along_axis(ids, order, axis=1)
    width = max(int((packed != 0).sum(axis=1).max()), 1)
    return packed[:, :width]


def embed_ids(embedding: Var, ids: np.ndarray) -> tuple[Var, np.ndarray]:
    tr = embedding.trace
    mask = ids != 0
    E = tr.gather(embedding, ids)
    if not mask.all():
        E = tr.mul(E, mask[..., None])
    return E, mask


def sequence_features(v: dict[str, Var], sequences: np.ndarray, config: ModelConfig) -> Var:
    """F_s for a (B, N) batch of padded sequences: the RMS-normalized layer
    output at each sequence's last valid click."""
    tr = v["embedding"].trace
    sequences = np.asarray(sequences)
    if sequences.ndim != 2:
        raise ValueError("sequences must be a (B, N) id array")
    if not (sequences != 0).any(axis=1).all():
        raise ValueError("every sequence needs at least one valid item")
    ids = compact_valid(sequences)
    E, mask = embed_ids(v["embedding"], ids)
    zs, _ = ttt_scan(v["theta_k"], v["theta_v"], v["theta_q"], v["w0"], E, mask,
                     config.inner_lr, config.mini_batch_size)
    # masked positions repeat the previous output, so the last position holds
    # the output of the last valid click
    return tr.rmsnorm(zs[-1], v["norm_gain"], RMS_EPS)


def target_features(v: dict[str, Var], candidates: np.ndarray) -> Var:
    """F_t = W2 gelu(W1 e_y + b1) + b2 for an integer array of candidate ids."""
    tr = v["embedding"].trace
    candidates = np.asarray(candidates)
    if candidates.size and candidates.min() < 1:
        raise ValueError("candidate id 0 is padding, not a valid target")
    e = tr.gather(v["embedding"], candidates)
    flat = len(e.shape) == 1
    if flat:
        e = tr.reshape(e, (1, -1))
    h = tr.gelu(tr.add(tr.matmul(e, v["mlp_w1"]), v["mlp_b1"]))
    out = tr.add(tr.matmul(h, v["mlp_w2"]), v["mlp_b2"])
    return tr.reshape(out, (-1,)) if flat else out


def candidate_scores(v: dict[str, Var], sequences: np.ndarray, candidates: np.ndarray,
                     config: ModelConfig) -> Var:
    """Scores (B, C) of C candidates for each of B sequences."""
    tr = v["embedding"].trace
    fs = sequence_features(v, sequences, config)
    ft = target_features(v, candidates)
    B, K = fs.shape
    return tr.dot(tr.reshape(fs, (B, 1, K)), ft)


def bce_with_logits(scores: Var, labels: np.ndarray) -> Var:
    """Mean of ``softplus(R) - y R``, i.e. BCE of sigmoid(R) against y."""
    tr = scores.trace
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    per = tr.sub(tr.softplus(scores), tr.mul(scores, labels))
    return tr.scale(tr.sum(per), 1.0 / labels.size)


def grouped_loss(v: dict[str, Var], sequences: np.ndarray, seq_index: np.ndarray,
                 candidates: np.ndarray, labels: np.ndarray, config: ModelConfig) -> Var:
    """BCE over instances that share sequence features via ``seq_index``."""
    tr = v["embedding"].trace
    fs = sequence_features(v, sequences, config)
    fs_i = tr.gather(fs, np.asarray(seq_index))
    ft = target_features(v, np.asarray(candidates))
    return bce_with_logits(tr.dot(fs_i, ft), labels)


# -- numpy-facing API ------------------------------------------------------------

def _const_view(params: ModelParams, trace: Trace) -> dict[str, Var]:
    return {k: trace.const(a) for k, a in params.as_dict().items()}


def embed_sequence(params: ModelParams, sequence: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(sequence, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() > params.vocab_size):
        raise IndexError(f"item id out of range [0, {params.vocab_size}]")
    tr = Trace(params.embedding.dtype)
    E, mask = embed_ids(tr.const(params.embedding), ids)
    return E.value, mask


def extract_sequence_features(params: ModelParams, sequence: Sequence[int], config: ModelConfig) -> np.ndarray:
    tr = Trace(params.embedding.dtype)
    return sequence_features(_const_view(params, tr), np.asarray([sequence]), config).value[0]


def target_tower(params: ModelParams, candidate: int) -> np.ndarray:
    if candidate < 1:
        raise ValueError("candidate id 0 is padding, not a valid target")
    tr = Trace(params.embedding.dtype)
    return target_features(_const_view(params, tr), np.asarray([candidate])).value[0]


def score(f_s: np.ndarray, f_t: np.ndarray) -> float:
    f_s, f_t = np.asarray(f_s), np.asarray(f_t)
    if f_s.shape != f_t.shape:
        raise ValueError(f"dimension mismatch {f_s.shape} vs {f_t.shape}")
    return float(np.dot(f_s, f_t))


def predict_proba(r):
    r = np.asarray(r, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * r))


def group_instances(instances: Sequence[Instance], max_len: int):
    """Unique (user, sequence) rows plus per-instance index arrays."""
    if not instances:
        raise ValueError("empty batch")
    keys: dict[tuple, int] = {}
    seq_index = []
    for inst in instances:
        key = (inst.user, tuple(inst.sequence))
        seq_index.append(keys.setdefault(key, len(keys)))
    sequences = pad_sequences([k[1] for k in keys], max_len)
    candidates = np.array([i.candidate for i in instances], dtype=np.int64)
    labels = np.array([i.label for i in instances])
    return sequences, np.array(seq_index), candidates, labels


def batch_loss(trace: Trace, leaves: dict[str, Var], instances: Sequence[Instance], config: ModelConfig) -> Var:
    """Mean BCE of a batch of instances, recorded on ``trace``.

    Sequence features are computed once per unique (user, sequence).
    """
    sequences, seq_index, candidates, labels = group_instances(instances, config.max_seq_len)
    return grouped_loss(leaves, sequences, seq_index, candidates, labels, config)
