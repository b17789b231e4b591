import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamcl.memory import (
    LOSS_FLOOR,
    MemoryEntry,
    ReplacementPolicy,
    ReplayBuffer,
    SamplingStrategy,
    lawcbr_select_victim,
    lawrrr_select_victim,
    lawrrr_weights,
)

LAWCBR, LAWRRR = ReplacementPolicy.LAWCBR, ReplacementPolicy.LAWRRR


def entry(y=0, loss=1.0, unc=0.5):
    return MemoryEntry(np.zeros(2), y, np.zeros(3), loss, unc)


def filled(labels, losses=None, uncs=None, capacity=None):
    buf = ReplayBuffer(capacity or len(labels))
    rng = np.random.default_rng(0)
    for i, y in enumerate(labels):
        buf.insert(entry(y, 1.0 if losses is None else losses[i], 0.5 if uncs is None else uncs[i]), LAWCBR, rng)
    return buf


def within_3sigma(count, n, p):
    sd = math.sqrt(n * p * (1 - p))
    return abs(count - n * p) <= 3 * sd


def victim_frequencies(buf, select, trials, seed=0):
    rng = np.random.default_rng(seed)
    counts = np.zeros(len(buf), dtype=int)
    for _ in range(trials):
        counts[select(buf, rng)] += 1
    return counts


# --------------------------------------------------------------------------
# construction and entries


def test_capacity_zero_rejected():
    with pytest.raises(ValueError):
        ReplayBuffer(0)


@pytest.mark.parametrize("loss,unc", [(-1.0, 0.1), (float("nan"), 0.1), (1.0, -0.1), (float("inf"), 0.0)])
def test_entry_invariants(loss, unc):
    with pytest.raises(ValueError):
        entry(0, loss, unc)


# --------------------------------------------------------------------------
# insert


def test_insert_into_empty():
    buf = ReplayBuffer(3)
    rep = buf.insert(entry(1), LAWRRR, np.random.default_rng(0))
    assert rep.stored and rep.index == 0 and rep.victim is None
    assert len(buf) == 1 and buf.seen_count == 1 and buf.class_counts[1] == 1


def test_lawrrr_admission_probability():
    # full buffer of 10 with seen_count 39 before the trial: admission chance 10/40
    trials, admitted = 100_000, 0
    rng = np.random.default_rng(1)
    base = filled([0] * 10)
    for _ in range(trials):
        buf = ReplayBuffer(10, list(base.entries), 39, base.class_counts.copy())
        admitted += buf.insert(entry(1), LAWRRR, rng).stored
    assert within_3sigma(admitted, trials, 10 / 40)


def test_lawcbr_full_buffer_evicts_majority():
    buf = filled([0, 0, 0, 1])
    rng = np.random.default_rng(0)
    for _ in range(50):
        b = ReplayBuffer(4, list(buf.entries), 4, buf.class_counts.copy())
        rep = b.insert(entry(1), LAWCBR, rng)
        assert rep.victim.y == 0


def test_lawcbr_tie_goes_to_smallest_label():
    buf = filled([2, 1, 2, 1])
    rng = np.random.default_rng(0)
    assert all(buf.entries[lawcbr_select_victim(buf, rng)].y == 1 for _ in range(100))


# --------------------------------------------------------------------------
# victim selection


def test_lawcbr_label_a():
    buf = filled([0, 0, 0, 1])  # A = 0, B = 1
    rng = np.random.default_rng(3)
    assert all(buf.entries[lawcbr_select_victim(buf, rng)].y == 0 for _ in range(200))


def test_lawcbr_inverse_loss_probabilities():
    buf = filled([0, 0, 0, 1], losses=[1, 1, 2, 0.01])
    n = 100_000
    counts = victim_frequencies(buf, lawcbr_select_victim, n)
    assert counts[3] == 0
    for i, p in enumerate([0.4, 0.4, 0.2]):
        assert within_3sigma(counts[i], n, p), (i, counts[i])


def test_lawcbr_equal_losses_uniform_within_class():
    buf = filled([0, 0, 0, 0, 1])
    n = 40_000
    counts = victim_frequencies(buf, lawcbr_select_victim, n)
    for i in range(4):
        assert within_3sigma(counts[i], n, 0.25)


def test_lawrrr_weights_same_class():
    buf = filled([0, 0], losses=[1, 3])
    w = lawrrr_weights(buf)
    np.testing.assert_allclose(w / w.sum(), [0.75, 0.25], rtol=1e-12)
    n = 100_000
    counts = victim_frequencies(buf, lawrrr_select_victim, n)
    assert within_3sigma(counts[0], n, 0.75)


def test_lawrrr_weights_class_counts():
    buf = filled([0, 0, 0, 0, 1])
    w = lawrrr_weights(buf)
    p = w / w.sum()
    # the four class-0 entries together vs the single class-1 entry
    assert p[:4].sum() == pytest.approx(16 / 17)
    # per-entry comparison from the two-entry example: counts [4, 1], equal losses
    assert w[0] / (w[0] + w[4]) == pytest.approx(0.8)


def test_lawrrr_single_entry():
    buf = filled([5])
    rng = np.random.default_rng(0)
    assert all(lawrrr_select_victim(buf, rng) == 0 for _ in range(20))


def test_zero_loss_is_clamped():
    buf = filled([0, 0], losses=[0.0, 1.0])
    w = lawrrr_weights(buf)
    assert np.all(np.isfinite(w))
    assert w[0] == pytest.approx(2 / LOSS_FLOOR)


# --------------------------------------------------------------------------
# replay selection


def test_uapn_example():
    buf = filled([0, 0, 0, 0], uncs=[0.1, 0.9, 0.5, 0.7])
    assert sorted(buf.sample_replay(2, SamplingStrategy.UAPN, np.random.default_rng(0))) == [0, 1]


def test_lapn_example():
    buf = filled([0, 0, 0, 0], losses=[5, 1, 3, 4])
    assert sorted(buf.sample_replay(2, SamplingStrategy.LAPN, np.random.default_rng(0))) == [0, 1]


@pytest.mark.parametrize("strategy", list(SamplingStrategy))
def test_undersized_buffer_returns_all(strategy):
    buf = filled([0, 1, 2])
    assert sorted(buf.sample_replay(16, strategy, np.random.default_rng(0))) == [0, 1, 2]


def test_odd_n_high_half_is_larger():
    buf = filled([0] * 6, uncs=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    idx = buf.sample_replay(3, SamplingStrategy.UAPN, np.random.default_rng(0))
    assert idx == [5, 4, 0]


def test_ties_broken_by_insertion_order():
    buf = filled([0] * 5, uncs=[0.5] * 5)
    # high half: oldest first among equal scores; low half: oldest remaining
    assert buf.sample_replay(4, SamplingStrategy.UAPN, np.random.default_rng(0)) == [0, 1, 2, 3]


def test_uniform_is_uniform():
    buf = filled(list(range(10)))
    rng = np.random.default_rng(2)
    n = 20_000
    counts = np.zeros(10, dtype=int)
    for _ in range(n):
        for i in buf.sample_replay(3, SamplingStrategy.UNIFORM, rng):
            counts[i] += 1
    for c in counts:
        assert within_3sigma(c, n, 0.3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.integers(0, 40),
       st.sampled_from(list(SamplingStrategy)))
def test_sample_replay_properties(scores, n, strategy):
    buf = filled([0] * len(scores), losses=scores, uncs=scores)
    idx = buf.sample_replay(n, strategy, np.random.default_rng(0))
    assert len(idx) == min(n, len(scores))
    assert len(set(idx)) == len(idx)
    if strategy is not SamplingStrategy.UNIFORM and n < len(scores):
        high, low = idx[: (n + 1) // 2], idx[(n + 1) // 2:]
        assert not set(high) & set(low)
        if high and low:
            assert min(scores[i] for i in high) >= max(scores[i] for i in low)


# --------------------------------------------------------------------------
# score updates


def test_update_scores_roundtrip():
    buf = filled([0, 1, 2])
    z_before = [e.z.copy() for e in buf.entries]
    buf.update_scores([2, 0], [7.0, 8.0], [np.ones(3), 2 * np.ones(3)], [0.3, 0.4])
    assert (buf.entries[2].loss, buf.entries[0].loss) == (7.0, 8.0)
    np.testing.assert_array_equal(buf.entries[0].h, 2 * np.ones(3))
    assert buf.entries[2].uncertainty == 0.3
    assert buf.entries[1].loss == 1.0
    for e, z in zip(buf.entries, z_before):
        np.testing.assert_array_equal(e.z, z)


def test_update_scores_empty_is_noop():
    buf = filled([0, 1])
    before = [(e.loss, e.uncertainty) for e in buf.entries]
    buf.update_scores([], [], [], [])
    assert [(e.loss, e.uncertainty) for e in buf.entries] == before


def test_update_scores_bad_index():
    buf = filled([0, 1])
    with pytest.raises(IndexError):
        buf.update_scores([2], [1.0], [np.zeros(3)], [0.1])


def test_update_then_lapn_reflects_new_order():
    buf = filled([0, 0, 0], losses=[1.0, 2.0, 3.0])
    rng = np.random.default_rng(0)
    assert buf.sample_replay(1, SamplingStrategy.LAPN, rng) == [2]
    buf.update_scores([0, 2], [3.0, 1.0], [np.zeros(3)] * 2, [0.5, 0.5])
    assert buf.sample_replay(1, SamplingStrategy.LAPN, rng) == [0]


# --------------------------------------------------------------------------
# invariants under random workloads


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.lists(st.tuples(st.integers(0, 4), st.floats(0, 5)), min_size=1, max_size=80),
       st.sampled_from(list(ReplacementPolicy)), st.integers(0, 2**31))
def test_buffer_invariants(capacity, stream, policy, seed):
    buf = ReplayBuffer(capacity)
    rng = np.random.default_rng(seed)
    for y, loss in stream:
        before = buf.class_counts.copy()
        rep = buf.insert(entry(y, loss), policy, rng)
        buf.check()
        if policy is LAWCBR and rep.victim is not None:
            assert before[rep.victim.y] == max(before.values())
    assert buf.seen_count == len(stream)


def test_reproducible_under_seed():
    def run(seed):
        buf = ReplayBuffer(5)
        rng = np.random.default_rng(seed)
        for i in range(50):
            buf.insert(entry(i % 3, 0.1 + i % 7), LAWRRR, rng)
        return [e.order for e in buf.entries]

    assert run(4) == run(4)


def test_snapshot():
    buf = filled([0, 0, 1], losses=[1.0, 2.0, 3.0])
    snap = buf.snapshot(bins=4)
    assert snap["class_counts"] == {"0": 2, "1": 1}
    assert sum(snap["loss_hist"]["counts"]) == 3
    assert snap["size"] == 3 and snap["capacity"] == 3
