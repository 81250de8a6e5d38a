"""TTT-Linear sequence layer.

The hidden state is the weight matrix ``W`` of a linear inner model.  Each
token ``x`` gives three views, ``x_K = theta_K x`` (input), ``x_V = theta_V x``
(reconstruction target) and ``x_Q = theta_Q x`` (query).  The inner loss is

    l(W; x) = ||W x_K - x_V||^2,   grad_W l = 2 (W x_K - x_V) x_K^T

and every valid token takes one gradient step on it before emitting
``z = W x_Q`` with the updated weights.

Everything is built on a :class:`~ttt4rec.autodiff.Trace` so that outer
training differentiates through the whole unrolled weight trajectory,
including the inner gradient itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, Trace, Var

TTT_PARAM_NAMES = ("theta_k", "theta_v", "theta_q", "w0", "norm_gain")


@dataclass(frozen=True)
class TTTConfig:
    dim: int = 64
    inner_lr: float = 1.0
    mini_batch_size: int = 1
    initializer_range: float = 0.1

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if not self.inner_lr > 0:
            raise ValueError("inner_lr must be > 0")
        if self.mini_batch_size < 1:
            raise ValueError("mini_batch_size must be >= 1")
        if not self.initializer_range > 0:
            raise ValueError("initializer_range must be > 0")


@dataclass
class TTTParams:
    theta_k: np.ndarray
    theta_v: np.ndarray
    theta_q: np.ndarray
    w0: np.ndarray
    norm_gain: np.ndarray

    def __post_init__(self):
        k = self.norm_gain.shape[0]
        for name in ("theta_k", "theta_v", "theta_q", "w0"):
            if getattr(self, name).shape != (k, k):
                raise ValueError(f"{name} must be {k}x{k}, got {getattr(self, name).shape}")

    @property
    def dim(self) -> int:
        return self.norm_gain.shape[0]

    @classmethod
    def init(cls, config: TTTConfig, rng: np.random.Generator) -> "TTTParams":
        k, std = config.dim, config.initializer_range
        return cls(
            theta_k=rng.normal(0.0, std, (k, k)),
            theta_v=rng.normal(0.0, std, (k, k)),
            theta_q=rng.normal(0.0, std, (k, k)),
            w0=rng.normal(0.0, std, (k, k)),
            norm_gain=np.ones(k),
        )

    @classmethod
    def identity(cls, dim: int) -> "TTTParams":
        eye = np.eye(dim)
        return cls(eye.copy(), eye.copy(), eye.copy(), eye.copy(), np.ones(dim))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TTT_PARAM_NAMES}

    def leaves(self, trace: Trace) -> dict[str, Var]:
        return {name: trace.leaf(arr, name=name) for name, arr in self.as_dict().items()}


@dataclass
class TTTState:
    W: np.ndarray
    step: int = 0


# -- traced building blocks --------------------------------------------------

def inner_gradient(W, xk: Var, xv: Var, weight: np.ndarray | None = None) -> Var:
    """``2 (W x_K - x_V) x_K^T`` for column views of shape (..., K, 1).

    ``weight`` (broadcastable to the residual) zeroes out masked tokens.
    """
    tr = xk.trace
    err = tr.sub(tr.matmul(W, xk), xv)
    if weight is not None:
        err = tr.mul(err, weight)
    return tr.matmul(tr.scale(err, 2.0), tr.transpose(xk))


def ttt_scan(
    theta_k: Var,
    theta_v: Var,
    theta_q: Var,
    w0: Var,
    tokens: Var,
    valid_mask: np.ndarray,
    eta: float,
    mini_batch_size: int = 1,
) -> tuple[list[Var], list[Var]]:
    """Run the layer over a batch of sequences.

    ``tokens`` is (B, T, K) and ``valid_mask`` (B, T).  Tokens are grouped into
    consecutive mini-batches of ``mini_batch_size`` positions; every token of a
    group takes its gradient at the group's entry weights and the gradients
    accumulate, so ``mini_batch_size=1`` is plain online gradient descent.
    Masked tokens contribute no gradient and repeat the previous output.

    Returns per-position outputs (B, K) and weights (B, K, K).
    """
    tr = tokens.trace
    B, T, K = tokens.shape
    mask = np.asarray(valid_mask, dtype=bool)
    if mask.shape != (B, T):
        raise ValueError(f"valid_mask shape {mask.shape} does not match tokens {tokens.shape}")
    if T == 0:
        raise ValueError("empty sequence")
    if not mask.any(axis=1).all():
        raise ValueError("every sequence needs at least one valid token")
    if mini_batch_size < 1:
        raise ValueError("mini_batch_size must be >= 1")

    # column views: (B, T, K) -> per-token (B, K, 1)
    views = [tr.matmul(tokens, tr.transpose(theta)) for theta in (theta_k, theta_v, theta_q)]

    W = w0
    W_entry = w0
    acc = None
    z_prev = None
    outputs, weights = [], []
    for t in range(T):
        xk, xv, xq = (tr.reshape(tr.slice(v, (slice(None), t)), (B, K, 1)) for v in views)
        m = mask[:, t]
        if t % mini_batch_size == 0:
            W_entry, acc = W, None
        g = inner_gradient(W_entry, xk, xv, None if m.all() else m.reshape(B, 1, 1))
        acc = g if acc is None else tr.add(acc, g)
        W = tr.sub(W_entry, tr.scale(acc, eta))
        z = tr.reshape(tr.matmul(W, xq), (B, K))
        if not m.all():
            keep = m.reshape(B, 1)
            z = tr.mul(z, keep)
            if z_prev is not None:
                z = tr.add(z, tr.mul(z_prev, ~keep))
        outputs.append(z)
        weights.append(W)
        z_prev = z
    return outputs, weights


# -- numpy-facing single-sequence API ----------------------------------------

def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} is not finite")
    return arr


def _column(tr: Trace, theta, x) -> Var:
    return tr.matmul(theta, tr.reshape(x, (-1, 1)))


def inner_loss(W: np.ndarray, x: np.ndarray, params: TTTParams) -> float:
    """Squared reconstruction error ``||W theta_K x - theta_V x||^2``."""
    for arr, what in ((W, "W"), (x, "x")):
        _check_finite(np.asarray(arr), what)
    tr = Trace()
    xv = tr.const(np.asarray(x, dtype=np.float64))
    err = tr.sub(tr.matmul(tr.const(W), _column(tr, tr.const(params.theta_k), xv)),
                 _column(tr, tr.const(params.theta_v), xv))
    return float(tr.sqnorm(err).value)


def inner_step(W: np.ndarray, x: np.ndarray, params: TTTParams, eta: float) -> np.ndarray:
    """One gradient step of the inner loss: ``W - eta * grad_W l(W; x)``."""
    if not eta > 0:
        raise ValueError("eta must be > 0")
    tr = Trace()
    xv = tr.const(np.asarray(x, dtype=np.float64))
    g = inner_gradient(tr.const(W), _column(tr, tr.const(params.theta_k), xv),
                       _column(tr, tr.const(params.theta_v), xv))
    out = tr.sub(tr.const(W), tr.scale(g, eta)).value
    return _check_finite(out, "updated inner weights (eta too large?)")


def output_token(W: np.ndarray, x: np.ndarray, params: TTTParams) -> np.ndarray:
    """``z = W theta_Q x``."""
    tr = Trace()
    xv = tr.const(np.asarray(x, dtype=np.float64))
    z = tr.matmul(tr.const(W), _column(tr, tr.const(params.theta_q), xv))
    return _check_finite(z.value.reshape(-1), "output token")


def _validate(tokens, valid_mask):
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ValueError("tokens must be a non-empty (T, K) array")
    mask = np.asarray(valid_mask, dtype=bool)
    if mask.shape != tokens.shape[:1]:
        raise ValueError("tokens and valid_mask must have the same length")
    if not mask.any():
        raise ValueError("all tokens are masked")
    return tokens, mask


def forward_sequence(params: TTTParams, tokens, valid_mask, eta: float) -> list[np.ndarray]:
    """Online schedule, token by token: ``W_t = inner_step(W_{t-1}, x_t)`` then
    ``z_t = output_token(W_t, x_t)``.  Masked tokens keep ``W`` and repeat the
    previous output (zeros before the first valid token)."""
    tokens, mask = _validate(tokens, valid_mask)
    W = params.w0
    z = np.zeros(params.dim)
    out = []
    for x, valid in zip(tokens, mask):
        if valid:
            W = inner_step(W, x, params, eta)
            z = output_token(W, x, params)
        out.append(z)
    return out


def _scan_single(params, tokens, valid_mask, eta, b):
    tokens, mask = _validate(tokens, valid_mask)
    tr = Trace()
    p = {k: tr.const(v) for k, v in params.as_dict().items()}
    zs, ws = ttt_scan(p["theta_k"], p["theta_v"], p["theta_q"], p["w0"],
                      tr.const(tokens[None]), mask[None], eta, b)
    for z in zs:
        _check_finite(z.value, "layer output")
    return [z.value[0] for z in zs], [np.broadcast_to(w.value, (1,) + w.shape[-2:])[0] for w in ws]


def forward_sequence_minibatch(params: TTTParams, tokens, valid_mask, eta: float, b: int) -> list[np.ndarray]:
    """Mini-batch schedule through the batched scan used by the model."""
    return _scan_single(params, tokens, valid_mask, eta, b)[0]


def weight_trajectory(params: TTTParams, tokens, valid_mask, eta: float, b: int = 1) -> list[TTTState]:
    """Inner weights after each position, starting from ``W0`` at step 0."""
    _, ws = _scan_single(params, tokens, valid_mask, eta, b)
    return [TTTState(params.w0.copy(), 0)] + [TTTState(w.copy(), t + 1) for t, w in enumerate(ws)]
