"""Contrastive loss oracles, memory bank semantics, and epoch plumbing.

Loss values below are worked out by hand from the definition
loss = -log(exp(s+/t) / sum_j exp(s_j/t)) before being frozen as constants.
"""

import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camreid import contrastive as ctr
from camreid import encoder as enc
from camreid.errors import InvalidInputError


def _bank_of(rows, dtype=np.float64):
    rows = np.atleast_2d(np.asarray(rows, dtype=dtype))
    bank = ctr.MemoryBank(max(len(rows), 1), rows.shape[1], dtype=dtype)
    bank.enqueue(rows)
    return bank


def test_info_nce_one_orthogonal_negative():
    # q = k+ (similarity 1), one orthogonal negative (similarity 0), t = 1:
    # loss = -log(e / (e + 1)) = log(1 + e^-1) = 0.31326168751822286
    q = np.array([1.0, 0.0])
    bank = _bank_of([[0.0, 1.0]])
    loss, grad_q, grad_k = ctr.info_nce(q, q, bank, temperature=1.0)
    assert loss == pytest.approx(0.31326168751822286, abs=1e-12)


def test_info_nce_uniform_logits_gives_log_n_plus_one():
    # Positive and N negatives all orthogonal to q: every logit is 0, so the
    # softmax is uniform over N+1 entries and loss = log(N+1) at any t.
    d = 8
    q = np.zeros(d)
    q[0] = 1.0
    k = np.zeros(d)
    k[1] = 1.0
    for n_neg, temperature in ((1, 0.07), (5, 0.5), (31, 1.0)):
        negs = np.zeros((n_neg, d))
        for i in range(n_neg):
            negs[i, 2 + (i % (d - 2))] = 1.0
        loss, _, _ = ctr.info_nce(q, k, _bank_of(negs), temperature)
        assert loss == pytest.approx(np.log(n_neg + 1), abs=1e-12)


def test_info_nce_bank_of_positive_copies():
    # K negatives identical to k+ make K+1 equal logits: loss = log(K+1),
    # independent of temperature.
    q = np.array([1.0, 0.0, 0.0])
    k = np.array([0.0, 1.0, 0.0])
    for kk in (1, 4, 16):
        bank = _bank_of(np.tile(k, (kk, 1)))
        loss, _, _ = ctr.info_nce(q, k, bank, temperature=0.07)
        assert loss == pytest.approx(np.log(kk + 1), abs=1e-10)


def test_info_nce_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    for trial in range(30):
        d = int(rng.integers(2, 9))
        n_neg = int(rng.integers(1, 17))
        q = rng.standard_normal(d)
        q /= np.linalg.norm(q)
        k = rng.standard_normal(d)
        k /= np.linalg.norm(k)
        negs = rng.standard_normal((n_neg, d))
        negs /= np.linalg.norm(negs, axis=1, keepdims=True)
        bank = _bank_of(negs)
        t = float(rng.uniform(0.05, 1.0))
        loss, grad_q, grad_k = ctr.info_nce(q, k, bank, t)

        # The loss extends off the unit sphere smoothly; finite differences
        # probe the same raw dot-product expression the gradients assume.
        def raw_loss(qv, kv):
            l_pos = qv @ kv / t
            l_neg = negs @ qv / t
            logits = np.concatenate([[l_pos], l_neg])
            m = logits.max()
            return float(-(l_pos - m) + np.log(np.exp(logits - m).sum()))

        h = 1e-7
        for i in range(d):
            dq = np.zeros(d)
            dq[i] = h
            fd = (raw_loss(q + dq, k) - raw_loss(q - dq, k)) / (2 * h)
            assert grad_q[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)
            fd = (raw_loss(q, k + dq) - raw_loss(q, k - dq)) / (2 * h)
            assert grad_k[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_info_nce_negative_order_irrelevant():
    rng = np.random.default_rng(9)
    d, n = 6, 12
    q = rng.standard_normal(d)
    q /= np.linalg.norm(q)
    k = rng.standard_normal(d)
    k /= np.linalg.norm(k)
    negs = rng.standard_normal((n, d))
    negs /= np.linalg.norm(negs, axis=1, keepdims=True)
    loss_a, _, _ = ctr.info_nce(q, k, _bank_of(negs), 0.2)
    loss_b, _, _ = ctr.info_nce(q, k, _bank_of(negs[::-1]), 0.2)
    assert loss_a == pytest.approx(loss_b, abs=1e-12)


def test_info_nce_monotone_in_positive_similarity():
    # Rotating k+ toward q strictly lowers the loss.
    d = 4
    q = np.zeros(d)
    q[0] = 1.0
    negs = np.eye(d)[2:]
    bank = _bank_of(negs)
    last = None
    for angle in (0.9, 0.6, 0.3, 0.0):
        k = np.array([np.cos(angle), np.sin(angle), 0.0, 0.0])
        loss, _, _ = ctr.info_nce(q, k, bank, 0.07)
        if last is not None:
            assert loss < last
        last = loss


def test_info_nce_input_validation():
    q = np.array([1.0, 0.0])
    with pytest.raises(InvalidInputError):
        ctr.info_nce(q, np.array([2.0, 0.0]), _bank_of([[0.0, 1.0]]), 0.07)
    empty = ctr.MemoryBank(4, 2)
    with pytest.raises(InvalidInputError):
        ctr.info_nce(q, q, empty, 0.07)
    with pytest.raises(InvalidInputError):
        ctr.info_nce(q, q, _bank_of([[0.0, 1.0]]), 0.0)


@given(
    st.lists(st.integers(min_value=1, max_value=7), min_size=1, max_size=30),
    st.integers(min_value=1, max_value=12),
)
@settings(max_examples=100, deadline=None)
def test_memory_bank_matches_deque_oracle(chunk_sizes, capacity):
    # The ring buffer must agree with a bounded deque on contents and order.
    dim = 3
    bank = ctr.MemoryBank(capacity, dim)
    oracle = collections.deque(maxlen=capacity)
    counter = 0
    for size in chunk_sizes:
        rows = np.zeros((size, dim), dtype=np.float32)
        for r in range(size):
            rows[r, counter % dim] = 1.0  # unit rows
            counter += 1
        tags = np.arange(counter - size, counter)
        bank.enqueue(rows)
        for tag, row in zip(tags, rows):
            oracle.append((tag, row))
        got = bank.contents()
        want = np.stack([row for _, row in oracle]) if oracle else np.zeros((0, dim))
        assert got.shape == want.shape
        assert np.array_equal(got, want.astype(np.float32))
        assert len(bank) == len(oracle)


def test_memory_bank_overflow_keeps_latest():
    bank = ctr.MemoryBank(3, 2)
    rows = np.array([[1.0, 0.0]] * 5, dtype=np.float32)
    rows[3] = [0.0, 1.0]
    rows[4] = [-1.0, 0.0]
    bank.enqueue(rows)
    got = bank.contents()
    assert np.array_equal(got, rows[2:])


def test_memory_bank_rejects_bad_keys():
    bank = ctr.MemoryBank(4, 3)
    with pytest.raises(InvalidInputError):
        bank.enqueue(np.array([[2.0, 0.0, 0.0]]))
    with pytest.raises(InvalidInputError):
        bank.enqueue(np.array([[1.0, 0.0]]))
    with pytest.raises(InvalidInputError):
        ctr.MemoryBank(0, 3)


def test_sample_tsd_pair_distinct_and_covers_all():
    rng = np.random.default_rng(2)
    rows = np.array([10, 20, 30], dtype=np.int64)
    seen = set()
    for _ in range(500):
        a, b = ctr.sample_tsd_pair(rows, rng)
        assert a != b
        assert a in rows and b in rows
        seen.add((a, b))
    # All 6 ordered pairs of 3 elements appear under uniform sampling.
    assert len(seen) == 6


def test_sample_tsd_pair_needs_two():
    with pytest.raises(InvalidInputError):
        ctr.sample_tsd_pair(np.array([1]), np.random.default_rng(0))


def _tiny_setup(n_obs=80, d_obs=6, d_emb=4, batch=16, bank=32):
    config = ctr.ContrastiveConfig(
        batch_size=batch, bank_size=bank, epochs_cid=1, epochs_tsd=4, aug_strength=0.3
    )
    pair = enc.init_encoder((d_obs, 8, d_emb), seed=0, dtype=np.float64)
    membank = ctr.MemoryBank(bank, d_emb, dtype=np.float64)
    optim = enc.OptimState.for_params(pair.query)
    rng = np.random.default_rng(4)
    obs = rng.standard_normal((n_obs, d_obs))
    return config, pair, membank, optim, rng, obs


def test_cid_epoch_runs_and_fills_bank():
    config, pair, bank, optim, rng, obs = _tiny_setup()
    stats = ctr.cid_epoch(pair, bank, obs, config, optim, rng, epoch=0)
    assert np.isfinite(stats.mean_loss)
    assert stats.bank_occupancy == 32  # 5 batches of 16 keys, capacity 32
    assert stats.lr == config.base_lr


def test_cid_epoch_rejects_short_input():
    config, pair, bank, optim, rng, obs = _tiny_setup()
    with pytest.raises(InvalidInputError):
        ctr.cid_epoch(pair, bank, obs[:10], config, optim, rng)


def test_tsd_epoch_uses_cosine_schedule_and_trains():
    config, pair, bank, optim, rng, obs = _tiny_setup()
    rows = [np.arange(s, s + 8, dtype=np.int64) for s in range(0, 80, 8)]
    stats0 = ctr.tsd_epoch(pair, bank, rows, obs, config, optim, rng, epoch=0)
    stats2 = ctr.tsd_epoch(pair, bank, rows, obs, config, optim, rng, epoch=2)
    assert stats0.lr == pytest.approx(config.base_lr)
    assert stats2.lr < stats0.lr
    assert np.isfinite(stats2.mean_loss)


def test_tsd_epoch_skips_singleton_segments():
    config, pair, bank, optim, rng, obs = _tiny_setup()
    rows = [np.array([0]), np.array([1])]
    with pytest.raises(InvalidInputError):
        ctr.tsd_epoch(pair, bank, rows, obs, config, optim, rng, epoch=0)


def test_contrastive_config_validation():
    with pytest.raises(InvalidInputError):
        ctr.ContrastiveConfig(temperature=0.0).validate()
    with pytest.raises(InvalidInputError):
        ctr.ContrastiveConfig(bank_size=100, batch_size=64).validate()
    with pytest.raises(InvalidInputError):
        ctr.ContrastiveConfig(key_momentum=1.5).validate()
    ctr.ContrastiveConfig().validate()
