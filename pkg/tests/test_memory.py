import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from imbameta import memory as mem
from imbameta.learner import Episode, Model, task_importance
from imbameta.memory import (
    ClusterImportance, MemoryBuffer, TaskRecord, cluster_importance, insertion_probability,
    m2d3_step, move_in_probability, move_in_scores, move_out_cluster_distribution, reservoir_step,
)


def filled(sizes, importance=1.0, capacity=None):
    buf = MemoryBuffer(capacity or sum(sizes.values()))
    for lab, n in sizes.items():
        for i in range(n):
            buf.insert(TaskRecord(None, lab, importance, i))
    return buf


class NeverRng:
    """Bernoulli draws always fail; anything else is an error."""

    def random(self):
        return 1.0


def toy_episode(rng, shift=0.0):
    X = rng.normal(size=(2, 2)) + shift
    return Episode(X, [0, 1], rng.normal(size=(2, 2)), [0, 1], 2, 1)


# ------------------------------------------------------------- importance

def test_cluster_importance_single_and_equal(rng):
    m = Model.init("linear", 2, 2, rng=rng, scale=1.0)
    ep = toy_episode(rng)
    buf = MemoryBuffer(5)
    buf.insert(TaskRecord(ep, 0, 0.0, 0))
    assert cluster_importance(buf, 0, m, 2, rng) == pytest.approx(task_importance(m, ep))
    buf2 = MemoryBuffer(5)
    for _ in range(4):
        buf2.insert(TaskRecord(ep, 3, 0.0, 0))
    assert cluster_importance(buf2, 3, m, 10, rng) == pytest.approx(task_importance(m, ep))


def test_cluster_importance_is_mean_over_all_when_R_covers(rng):
    m = Model.init("linear", 2, 2, rng=rng, scale=1.0)
    eps = [toy_episode(rng, s) for s in range(5)]
    buf = MemoryBuffer(5)
    for ep in eps:
        buf.insert(TaskRecord(ep, 0, 0.0, 0))
    norms = [task_importance(m, ep) for ep in eps]
    assert cluster_importance(buf, 0, m, 5, rng) == pytest.approx(sum(norms) / 5, rel=1e-12)
    with pytest.raises(ValueError):
        cluster_importance(buf, 1, m, 2, rng)


def test_cluster_importance_samples_without_replacement(rng):
    m = Model.init("linear", 2, 2, rng=rng, scale=1.0)
    eps = [toy_episode(rng, s) for s in range(4)]
    buf = MemoryBuffer(4)
    for ep in eps:
        buf.insert(TaskRecord(ep, 0, 0.0, 0))
    norms = sorted(task_importance(m, ep) for ep in eps)
    pair_means = {round((a + b) / 2, 12) for i, a in enumerate(norms) for b in norms[i + 1:]}
    for _ in range(30):
        assert round(cluster_importance(buf, 0, m, 2, rng), 12) in pair_means


# ----------------------------------------------------------------- move in

def test_move_in_symmetric_half():
    buf = filled({0: 6})
    assert move_in_probability(buf, 0.0, 1, ClusterImportance({0: 1.0})) == 0.5


def test_move_in_closed_form():
    # n=10, n_L=4, I_new=2, M_s=1: one older cluster of 6 tasks with (6/10)*I = 1
    buf = filled({0: 6, 1: 4})
    imp = ClusterImportance({0: 10.0 / 6.0, 1: 5.0})
    s_new, s_mem = move_in_scores(buf, 2.0, 1, imp)
    assert (s_new, s_mem) == (pytest.approx(1.2), pytest.approx(0.4))
    assert move_in_probability(buf, 2.0, 1, imp) == pytest.approx(1 / (1 + math.exp(-0.8)), abs=1e-12)
    assert move_in_probability(buf, 2.0, 1, imp) == pytest.approx(0.68997, abs=5e-6)


def test_move_in_no_older_cluster_gives_zero_mean():
    buf = filled({0: 6, 1: 4})
    s_new, s_mem = move_in_scores(buf, 1.0, 0, ClusterImportance({0: 9.0, 1: 9.0}))
    assert s_mem == 0.0 and s_new == pytest.approx(0.4)


def test_move_in_excludes_current_cluster_importance():
    buf = filled({0: 5, 1: 5})
    a = move_in_probability(buf, 1.0, 1, ClusterImportance({0: 1.0, 1: 1.0}))
    b = move_in_probability(buf, 1.0, 1, ClusterImportance({0: 1.0, 1: 100.0}))
    assert a == b


def test_move_in_monotone_in_importance():
    buf = filled({0: 5, 1: 3})
    imp = ClusterImportance({0: 2.0, 1: 1.0})
    ps = [move_in_probability(buf, x, 1, imp) for x in np.linspace(0, 5, 20)]
    assert all(b > a for a, b in zip(ps, ps[1:]))


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-1e3, 1e3))
def test_insertion_probability_shift_invariant(s_new, s_mem, c):
    p = insertion_probability(s_new, s_mem)
    assert 0 <= p <= 1
    assert insertion_probability(s_new + c, s_mem + c) == pytest.approx(p, abs=1e-12)


def test_insertion_probability_no_overflow():
    assert insertion_probability(1e4, 0.0) == 1.0
    assert insertion_probability(0.0, 1e4) == 0.0


# ---------------------------------------------------------------- move out

def test_move_out_equal_clusters_half():
    buf = filled({0: 4, 1: 4, 2: 2})
    dist = move_out_cluster_distribution(buf, 2, ClusterImportance({0: 1.0, 1: 1.0, 2: 1.0}))
    assert dist == {0: pytest.approx(0.5), 1: pytest.approx(0.5)}


def test_move_out_closed_form():
    buf = filled({0: 8, 1: 2})
    dist = move_out_cluster_distribution(buf, 2, ClusterImportance({0: 1.0, 1: 1.0}))
    assert dist[0] == pytest.approx(1 / (1 + math.exp(-0.6)), abs=1e-12)
    assert dist[0] == pytest.approx(0.64566, abs=5e-6)


def test_move_out_importance_protects():
    buf = filled({0: 5, 1: 5, 2: 1})
    lo = move_out_cluster_distribution(buf, 2, ClusterImportance({0: 1.0, 1: 1.0}))[1]
    hi = move_out_cluster_distribution(buf, 2, ClusterImportance({0: 1.0, 1: 3.0}))[1]
    assert hi < lo


def test_move_out_requires_older_cluster():
    with pytest.raises(ValueError):
        move_out_cluster_distribution(filled({0: 3}), 0, ClusterImportance({0: 1.0}))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=6), st.lists(st.floats(0, 20), min_size=6, max_size=6))
def test_move_out_is_distribution(sizes, imps):
    buf = filled(dict(enumerate(sizes)))
    imp = ClusterImportance({i: imps[i] for i in range(len(sizes))})
    dist = move_out_cluster_distribution(buf, len(sizes), imp)
    vals = np.array(list(dist.values()))
    assert abs(vals.sum() - 1) <= 1e-12 and np.all((vals >= 0) & (vals <= 1))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.floats(0, 20))
def test_larger_cluster_evicted_at_least_as_often(a, b, g):
    buf = filled({0: a, 1: b, 2: 1})
    dist = move_out_cluster_distribution(buf, 2, ClusterImportance({0: g, 1: g}))
    if a >= b:
        assert dist[0] >= dist[1]
    else:
        assert dist[1] >= dist[0]


# ---------------------------------------------------------------- m2d3_step

def test_fill_without_eviction():
    buf = MemoryBuffer(10)
    imp = ClusterImportance()
    rng = np.random.default_rng(0)
    reports = [m2d3_step(buf, None, None, False, 0, imp, rng, t, importance=1.0) for t in range(10)]
    assert all(r.inserted and r.evicted is None for r in reports)
    assert len(buf) == 10


def test_failed_bernoulli_leaves_buffer():
    buf = filled({0: 5, 1: 5})
    before = buf.snapshot()
    r = m2d3_step(buf, None, None, False, 1, ClusterImportance({0: 1.0, 1: 1.0}), NeverRng(), 99, importance=3.0)
    assert not r.inserted and r.evicted is None
    assert buf.snapshot() == before


def test_eviction_only_from_older_clusters():
    rng = np.random.default_rng(0)
    buf = MemoryBuffer(20)
    imp = ClusterImportance()
    t = 0
    for label, n in enumerate([30, 10, 40]):
        for _ in range(n):
            t += 1
            r = m2d3_step(buf, None, None, False, label, imp, rng, t, importance=float(rng.uniform(0, 3)))
            buf.check()
            if r.evicted is not None and any(lab < label for lab in buf.clusters):
                assert r.evicted[0] < label or label == 0


def test_degenerate_evicts_from_current():
    rng = np.random.default_rng(1)
    buf = filled({0: 5})
    for t in range(50):
        r = m2d3_step(buf, None, None, False, 0, ClusterImportance(), rng, t, importance=0.0)
        if r.evicted is not None:
            assert r.evicted[0] == 0
    assert len(buf) == 5
    assert any(rec.arrival_step > 0 for rec in buf.records())


def test_new_label_registers_cluster():
    rng = np.random.default_rng(2)
    buf = MemoryBuffer(4)
    for t in range(4):
        m2d3_step(buf, None, None, False, 0, ClusterImportance(), rng, t, importance=1.0)
    inserted = False
    for t in range(4, 60):
        r = m2d3_step(buf, None, None, t == 4, 1, ClusterImportance({0: 1.0}), rng, t, importance=1.0)
        inserted |= r.inserted
    assert inserted and 1 in buf.clusters


def test_m2d3_uses_model_importance(rng):
    m = Model.init("linear", 2, 2, rng=rng, scale=1.0)
    ep = toy_episode(rng)
    buf = MemoryBuffer(3)
    m2d3_step(buf, ep, m, False, 0, ClusterImportance(), rng, 7)
    rec = buf.records()[0]
    assert rec.importance == pytest.approx(task_importance(m, ep)) and rec.arrival_step == 7


def test_snapshot_json():
    buf = filled({0: 1, 2: 2})
    data = json.loads(buf.snapshot_json())
    assert data == [
        {"label": 0, "arrival_step": 0, "importance": 1.0},
        {"label": 2, "arrival_step": 0, "importance": 1.0},
        {"label": 2, "arrival_step": 1, "importance": 1.0},
    ]


def test_capacity_assertion():
    buf = filled({0: 2})
    with pytest.raises(AssertionError):
        buf.insert(TaskRecord(None, 0, 0.0, 0))


def test_record_validation():
    with pytest.raises(ValueError):
        TaskRecord(None, -1, 0.0, 0)
    with pytest.raises(ValueError):
        TaskRecord(None, 0, -0.5, 0)
    with pytest.raises(ValueError):
        MemoryBuffer(0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 15), st.lists(st.integers(1, 40), min_size=1, max_size=5))
def test_m2d3_invariants(seed, cap, segs):
    rng = np.random.default_rng(seed)
    buf = MemoryBuffer(cap)
    imp = ClusterImportance()
    t = 0
    for label, n in enumerate(segs):
        for _ in range(n):
            t += 1
            if t % 5 == 0:
                imp = ClusterImportance({lab: float(rng.uniform(0, 2)) for lab in buf.clusters}, t)
            m2d3_step(buf, None, None, False, label, imp, rng, t, importance=float(rng.uniform(0, 2)))
            assert len(buf) <= cap
            assert sum(buf.sizes().values()) == len(buf.records())
            assert all(buf.clusters.values())


# ---------------------------------------------------------------- reservoir

def test_reservoir_fills_first():
    buf = MemoryBuffer(5)
    rng = np.random.default_rng(0)
    assert all(reservoir_step(buf, i, rng, step=i).inserted for i in range(5))
    assert buf.seen_count == 5


@pytest.fixture(scope="module")
def retention_counts():
    counts = np.zeros(1000)
    for seed in range(5000):
        rng = np.random.default_rng(seed)
        buf = MemoryBuffer(50)
        for i in range(1000):
            reservoir_step(buf, None, rng, step=i)
        for r in buf.records():
            counts[r.arrival_step] += 1
    return counts


def test_reservoir_uniform_retention(retention_counts):
    # per-item sd is sqrt(.05 * .95 / 5000) ~ 0.0031: bound every item at 5 sd and test uniformity
    freq = retention_counts / 5000
    assert freq.mean() == pytest.approx(0.05, abs=1e-15)
    assert np.all(np.abs(freq - 0.05) <= 5 * np.sqrt(0.05 * 0.95 / 5000))
    assert chisquare(retention_counts).pvalue > 0.01


@pytest.mark.xfail(strict=True, reason="+-0.01 is 3.2 sd per item; ~1.2 of 1000 items are expected outside it "
                   "(measured: one item at 0.0622)")
def test_reservoir_retention_literal_tolerance(retention_counts):
    assert np.all(np.abs(retention_counts / 5000 - 0.05) <= 0.01)


def test_reservoir_capacity_one():
    kept = 0
    for seed in range(5000):
        rng = np.random.default_rng(seed)
        buf = MemoryBuffer(1)
        reservoir_step(buf, None, rng, step=0)
        reservoir_step(buf, None, rng, step=1)
        kept += buf.records()[0].arrival_step == 1
    assert abs(kept / 5000 - 0.5) <= 0.03


# ---------------------------------------------------------------- balance

def balance_run(seed, method, total=200, capacity=60, importance=1.0):
    rng = np.random.default_rng(seed)
    buf = MemoryBuffer(capacity)
    imp = ClusterImportance()
    counts = [int(0.7 * total), int(0.2 * total)]
    counts.append(total - sum(counts))
    t = 0
    for label, n in enumerate(counts):
        for _ in range(n):
            t += 1
            if method == "m2d3":
                m2d3_step(buf, None, None, False, label, imp, rng, t, importance=importance)
            else:
                reservoir_step(buf, None, rng, label=label, step=t)
    sizes = [buf.sizes().get(k, 0) for k in range(3)]
    return max(sizes) / min(sizes) if min(sizes) else math.inf


def test_balance_better_than_reservoir():
    wins = sum(balance_run(s, "m2d3") < balance_run(s, "reservoir") for s in range(20))
    assert wins >= 18
