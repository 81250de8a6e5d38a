import math

import numpy as np
import pytest

from ttt4rec.autodiff import Trace, grad_check
from ttt4rec.model import (
    Instance,
    ModelConfig,
    ModelParams,
    batch_loss,
    bce_with_logits,
    candidate_scores,
    embed_sequence,
    extract_sequence_features,
    init_params,
    predict_proba,
    score,
    target_tower,
)
from ttt4rec.ttt import TTTParams, inner_step, output_token


def gelu_oracle(x):
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def mlp_oracle(e, W1, b1, W2, b2):
    K, H = W1.shape
    h = [gelu_oracle(sum(e[i] * W1[i, j] for i in range(K)) + b1[j]) for j in range(H)]
    return np.array([sum(h[j] * W2[j, k] for j in range(H)) + b2[k] for k in range(W2.shape[1])])


def rms_oracle(v, gain, eps=1e-6):
    r = math.sqrt(sum(x * x for x in v) / len(v) + eps)
    return np.array([x / r * g for x, g in zip(v, gain)])


def random_model(seed, vocab=20, K=4, H=8, N=6, b=1, scale=0.5):
    cfg = ModelConfig(vocab_size=vocab, embed_dim=K, mlp_hidden=H, max_seq_len=N, inner_lr=0.2,
                      mini_batch_size=b, initializer_range=scale)
    r = np.random.default_rng(seed)
    d = {k: r.normal(0, scale, v.shape) for k, v in init_params(cfg, seed).as_dict().items()}
    d["embedding"][0] = 0.0
    return cfg, ModelParams.from_dict(d)


# --- init_params ------------------------------------------------------------------

def test_init_is_deterministic():
    cfg = ModelConfig(vocab_size=30, embed_dim=8)
    a, b = init_params(cfg, 3).as_dict(), init_params(cfg, 3).as_dict()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_init_padding_row_is_zero():
    p = init_params(ModelConfig(vocab_size=30, embed_dim=8), 0)
    np.testing.assert_array_equal(p.embedding[0], 0.0)


def test_init_ttt_std_follows_initializer_range():
    p = init_params(ModelConfig(vocab_size=5, embed_dim=50, initializer_range=0.1), 0)
    draws = np.concatenate([a.ravel() for a in (p.ttt.theta_k, p.ttt.theta_v, p.ttt.theta_q, p.ttt.w0)])
    assert draws.size >= 10**4
    assert abs(draws.std() - 0.1) <= 0.01
    # embeddings and tower ignore initializer_range
    assert abs(p.mlp_w1.std() - 0.02) <= 0.005


# --- embedding ---------------------------------------------------------------------

def test_embed_padding_positions():
    cfg, p = random_model(0)
    E, mask = embed_sequence(p, [0, 0, 3, 4])
    np.testing.assert_array_equal(mask, [False, False, True, True])
    np.testing.assert_array_equal(E[:2], 0.0)


def test_embed_lookup_is_row():
    cfg, p = random_model(0)
    E, _ = embed_sequence(p, [7])
    assert E[0].tobytes() == p.embedding[7].tobytes()


def test_embed_relabeling(rng):
    cfg, p = random_model(1)
    perm = np.concatenate([[0], rng.permutation(np.arange(1, 21))])  # new id of old id
    table = np.empty_like(p.embedding)
    table[perm] = p.embedding
    q = ModelParams.from_dict({**p.as_dict(), "embedding": table})
    seq = [0, 5, 2, 19, 4]
    np.testing.assert_array_equal(embed_sequence(p, seq)[0], embed_sequence(q, perm[seq])[0])


def test_embed_out_of_range():
    cfg, p = random_model(0)
    with pytest.raises(IndexError):
        embed_sequence(p, [21])


# --- sequence features --------------------------------------------------------------

def test_trailing_padding_keeps_features():
    cfg, p = random_model(2)
    a = extract_sequence_features(p, [0, 0, 3, 4, 5, 6], cfg)
    b = extract_sequence_features(p, [3, 4, 5, 6, 0, 0], cfg)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_single_token_features_unrolled():
    cfg, p = random_model(3)
    e = p.embedding[9]
    z = output_token(inner_step(p.ttt.w0, e, p.ttt, cfg.inner_lr), e, p.ttt)
    np.testing.assert_allclose(extract_sequence_features(p, [0, 0, 0, 0, 0, 9], cfg),
                               rms_oracle(z, p.ttt.norm_gain), atol=1e-12)


def test_three_token_features_scripted():
    cfg, p = random_model(4)
    W = p.ttt.w0
    for i in (4, 8, 15):
        e = p.embedding[i]
        W = W - cfg.inner_lr * 2 * np.outer(W @ (p.ttt.theta_k @ e) - p.ttt.theta_v @ e, p.ttt.theta_k @ e)
        z = W @ (p.ttt.theta_q @ e)
    np.testing.assert_allclose(extract_sequence_features(p, [0, 0, 0, 4, 8, 15], cfg),
                               rms_oracle(z, p.ttt.norm_gain), atol=1e-10)


def test_all_padding_rejected():
    cfg, p = random_model(0)
    with pytest.raises(ValueError):
        extract_sequence_features(p, [0, 0, 0], cfg)


# --- target tower ---------------------------------------------------------------------

def test_target_tower_constant_map():
    cfg, p = random_model(0)
    c = np.arange(4.0)
    q = ModelParams.from_dict({**p.as_dict(), "mlp_w1": np.zeros((4, 8)), "mlp_w2": np.zeros((8, 4)),
                               "mlp_b2": c})
    for item in (1, 5, 20):
        np.testing.assert_array_equal(target_tower(q, item), c)


def test_target_tower_deterministic():
    cfg, p = random_model(0)
    assert target_tower(p, 3).tobytes() == target_tower(p, 3).tobytes()


def test_target_tower_matches_loop_oracle():
    cfg, p = random_model(5)
    expect = mlp_oracle(p.embedding[11], p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2)
    np.testing.assert_allclose(target_tower(p, 11), expect, atol=1e-12)


def test_target_tower_rejects_padding():
    cfg, p = random_model(0)
    with pytest.raises(ValueError):
        target_tower(p, 0)


# --- score / predict_proba ------------------------------------------------------------

def test_score_examples(rng):
    assert score([1, 0], [0, 1]) == 0
    u = np.ones(4) / 2
    assert score(u, u) == pytest.approx(1.0)
    a, b = rng.normal(size=7), rng.normal(size=7)
    assert score(a, b) == pytest.approx(math.fsum(x * y for x, y in zip(a, b)), abs=1e-14)
    assert score(a, b) == score(b, a)


def test_predict_proba():
    assert predict_proba(0.0) == 0.5
    assert predict_proba(1000.0) == 1.0
    assert predict_proba(-1000.0) == 0.0
    r = np.random.default_rng(0).normal(0, 5, size=(500, 2))
    lo, hi = r.min(axis=1), r.max(axis=1)
    strict = hi > lo
    assert np.all(predict_proba(lo[strict]) <= predict_proba(hi[strict]))
    mid = np.abs(r) < 15  # away from float saturation the order is strict
    both = strict & mid.all(axis=1)
    assert np.all(predict_proba(lo[both]) < predict_proba(hi[both]))


def test_ranking_by_score_equals_ranking_by_probability(rng):
    cfg, p = random_model(6)
    tr = Trace()
    v = {k: tr.const(a) for k, a in p.as_dict().items()}
    s = candidate_scores(v, np.array([[0, 0, 1, 2, 3, 4]]), np.array([np.arange(5, 21)]), cfg).value[0]
    np.testing.assert_array_equal(np.argsort(-s, kind="stable"), np.argsort(-predict_proba(s), kind="stable"))


# --- loss -------------------------------------------------------------------------------

def test_loss_at_half_probability_is_ln2():
    tr = Trace()
    loss = bce_with_logits(tr.leaf(np.zeros(10)), np.array([1, 0] * 5))
    assert float(loss.value) == pytest.approx(math.log(2))


def test_loss_vanishes_for_confident_correct_predictions():
    tr = Trace()
    loss = bce_with_logits(tr.leaf(np.array([50.0, -50.0])), np.array([1, 0]))
    assert float(loss.value) < 1e-20


def test_bad_label_rejected():
    with pytest.raises(ValueError):
        Instance(1, 2, (1,), 2)
    tr = Trace()
    with pytest.raises(ValueError):
        bce_with_logits(tr.leaf(np.zeros(2)), np.array([1, 3]))


def _instances():
    return [Instance(1, 3, (0, 0, 4, 5, 6), 1), Instance(1, 9, (0, 0, 4, 5, 6), 0),
            Instance(2, 7, (0, 1, 2, 9, 8), 0)]


@pytest.mark.parametrize("b", [1, 2])
def test_batch_loss_gradient_check(b):
    cfg, p = random_model(7, N=5, b=b)
    err = grad_check(lambda tr, v: batch_loss(tr, v, _instances(), cfg), p.as_dict(), 1e-6)
    assert err <= 1e-4


def test_batch_loss_shares_sequence_features():
    cfg, p = random_model(8, N=5)
    tr = Trace()
    v = p.leaves(tr)
    batch_loss(tr, v, _instances(), cfg)
    rms = [n for n in tr.nodes if n.kind == "rmsnorm"]
    assert len(rms) == 1 and rms[0].value.shape[0] == 2  # two unique (user, sequence) pairs


def test_padding_row_gets_no_gradient():
    cfg, p = random_model(9, N=5)
    tr = Trace()
    v = p.leaves(tr)
    g = tr.grad(batch_loss(tr, v, _instances(), cfg), v)
    np.testing.assert_array_equal(g["embedding"][0], 0.0)


def test_leading_padding_is_neutral():
    for seed in range(20):
        cfg, p = random_model(seed, N=12, b=1 + seed % 3)
        r = np.random.default_rng(seed)
        seq = list(r.integers(1, 21, size=4))
        a = extract_sequence_features(p, seq, cfg)
        b = extract_sequence_features(p, [0] * 8 + seq, cfg)
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_shared_embedding_affects_both_towers():
    cfg, p = random_model(10)
    q = p.copy()
    q.embedding[5] += 1.0
    assert not np.allclose(target_tower(p, 5), target_tower(q, 5))
    assert not np.allclose(extract_sequence_features(p, [1, 2, 5], cfg), extract_sequence_features(q, [1, 2, 5], cfg))
    np.testing.assert_array_equal(target_tower(p, 6), target_tower(q, 6))
