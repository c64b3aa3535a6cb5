import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgalign.evaluate import embedding_rank_metrics
from kgalign.kg import KnowledgeGraph, SynthConfig, l2_normalize, synth_kg_pair
from kgalign.similarity import build_candidate_set, mine_pseudo_pairs
from kgalign.trainer import (DivergenceError, MeanNeighborAggregator, NegativeSampler, TrainConfig, aggregate,
                             align_loss, finite_difference_check, gradient_check, guided_loss, hinge_loss,
                             manhattan, sample_negatives, train, weight_schedule)

from oracles import hinge_direct, random_hinge_problem


def path_graph(n, prefix="e"):
    return KnowledgeGraph.build([f"{prefix}{i}" for i in range(n)], ["r"], [(i, 0, i + 1) for i in range(n - 1)])


def test_aggregate_examples():
    kg = KnowledgeGraph.build(["a", "b"], ["r"], [(0, 0, 1)])
    P = np.array([[0.0, 0.0], [2.0, 2.0]])
    # the neighbour mean excludes the entity itself, so both land on the midpoint
    assert aggregate(P, kg, 0.5).tolist() == [[1.0, 1.0], [1.0, 1.0]]
    assert aggregate(P, kg, 0.25).tolist() == [[0.5, 0.5], [1.5, 1.5]]
    assert np.array_equal(aggregate(P, kg, 0.0), P)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 12), gamma=st.floats(0, 1), seed=st.integers(0, 2 ** 16))
def test_aggregate_matches_per_node_formula(n, gamma, seed):
    rng = np.random.default_rng(seed)
    edges = [(i, 0, j) for i in range(n) for j in range(n) if i != j and rng.random() < 0.25]
    kg = KnowledgeGraph.build([str(i) for i in range(n)], ["r"], edges)
    P = rng.standard_normal((n, 3))
    X = aggregate(P, kg, gamma)
    for i in range(n):
        nb = kg.neighbors(i)
        want = P[i] if len(nb) == 0 else (1 - gamma) * P[i] + gamma * P[nb].mean(0)
        assert np.allclose(X[i], want)


def test_aggregate_isolated_passthrough():
    kg = KnowledgeGraph.build(["a", "b", "c"], ["r"], [(0, 0, 1)])
    P = np.arange(6.0).reshape(3, 2)
    assert aggregate(P, kg, 0.7)[2].tolist() == [4.0, 5.0]


def test_aggregate_preserves_sum_on_regular_graph():
    n = 7
    kg = KnowledgeGraph.build([str(i) for i in range(n)], ["r"], [(i, 0, (i + 1) % n) for i in range(n)])
    P = np.random.default_rng(0).standard_normal((n, 3))
    assert np.allclose(aggregate(P, kg, 0.6).sum(0), P.sum(0))


def test_aggregator_backward_is_adjoint():
    rng = np.random.default_rng(1)
    kg = path_graph(9)
    agg = MeanNeighborAggregator(kg, 0.35)
    P, G = rng.standard_normal((9, 4)), rng.standard_normal((9, 4))
    assert np.isclose((agg.forward(P) * G).sum(), (P * agg.backward(G)).sum())


def test_manhattan_examples():
    assert manhattan([0, 0], [0, 0]) == 0
    assert manhattan([1, 2], [3, 0]) == 4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 16))
def test_manhattan_triangle(seed):
    u, v, w = np.random.default_rng(seed).standard_normal((3, 5))
    assert manhattan(u, w) <= manhattan(u, v) + manhattan(v, w) + 1e-12


def test_hinge_hand_values():
    Xs = np.array([[0.0], [10.0]])
    Xt = np.array([[0.0], [5.0]])
    # d(pos)=0, d(neg)=10 -> satisfied
    loss, _, _ = hinge_loss(Xs, Xt, [0], [0], [[1]], [[0]], 1.0)
    assert loss == 0.0
    # d(pos)=5, d(neg)=3 -> 3
    Xs = np.array([[0.0], [3.0]])
    loss, _, _ = hinge_loss(Xs, Xt, [0], [1], [[1]], [[0]], 1.0)
    assert loss == 3.0
    loss, _, _ = hinge_loss(Xs, Xt, [0], [1], [[1]], [[0]], 1.0, weights=[0.5])
    assert loss == 1.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16))
def test_losses_equal_direct_sum(seed):
    rng = np.random.default_rng(seed)
    Xs, Xt = rng.standard_normal((8, 3)), rng.standard_normal((6, 3))
    pos = list(zip(rng.integers(0, 8, 5).tolist(), rng.integers(0, 6, 5).tolist()))
    ns, nt = rng.integers(0, 8, (5, 4)), rng.integers(0, 6, (5, 4))
    negs = [list(zip(ns[k], nt[k])) for k in range(5)]
    la, _, _ = align_loss(Xs, Xt, pos, (ns, nt), 1.0)
    assert la == pytest.approx(hinge_direct(Xs, Xt, pos, negs, 1.0))
    w = rng.uniform(0, 1, 5)
    g = (np.array([p[0] for p in pos]), np.array([p[1] for p in pos]), w)
    lg, _, _ = guided_loss(Xs, Xt, g, (ns, nt), 1.0)
    assert lg == pytest.approx(hinge_direct(Xs, Xt, pos, negs, 1.0, w))
    assert la >= 0 and lg >= 0


def test_guided_half_weight_halves_hinge():
    Xs = np.array([[0.0], [3.0]])
    Xt = np.array([[0.0], [5.0]])
    loss, _, _ = guided_loss(Xs, Xt, (np.array([0]), np.array([1]), np.array([0.5])), ([[1]], [[0]]), 2.0)
    assert loss == 2.0  # hinge 5 - 3 + 2 = 4, halved


def test_guided_zero_weights_zero_loss_and_gradient():
    rng = np.random.default_rng(3)
    Xs, Xt = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    g = (np.arange(5), np.arange(5), np.zeros(5))
    negs = (rng.integers(0, 5, (5, 2)), rng.integers(0, 5, (5, 2)))
    loss, gs, gt = guided_loss(Xs, Xt, g, negs, 1.0)
    assert loss == 0.0
    assert not gs.any() and not gt.any()


def test_schedule_values_exact():
    T = 800
    assert weight_schedule(0, Fraction(3, 10), Fraction(1, 4), T) == Fraction(3, 10)
    assert weight_schedule(T // 8, Fraction(3, 10), Fraction(1, 4), T) == Fraction(3, 20)
    assert all(weight_schedule(t, Fraction(3, 10), Fraction(1, 4), T) == 0 for t in range(T // 4, T + 1))


@settings(max_examples=50, deadline=None)
@given(T=st.integers(1, 500), f=st.floats(0.01, 1.0), w0=st.floats(0, 2))
def test_schedule_non_increasing(T, f, w0):
    vals = [weight_schedule(t, w0, f, T) for t in range(T + 1)]
    assert vals[0] == w0
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert all(v == 0 for t, v in enumerate(vals) if t >= f * T)


def test_no_decay_constant_weight():
    cfg = TrainConfig(decay=False, total_steps=100)
    assert {cfg.weight(t) for t in range(100)} == {0.3}


def test_config_validation():
    for bad in (dict(decay_end_fraction=0), dict(learning_rate=0), dict(neg_per_pair=0), dict(total_steps=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def small_data(noise=0.3, seed=0, n=60):
    return synth_kg_pair(SynthConfig(n_matchable=n, n_dangling_src=10, n_dangling_tgt=10, dim=16,
                                     noise_sigma=noise, edge_prob=0.05, seed=seed))


def test_negatives_structure_and_determinism():
    src, tgt, se, te, _ = small_data()
    sampler = NegativeSampler(src, tgt, l2_normalize(se), l2_normalize(te), n_candidates=5)
    a = sample_negatives((3, 4), sampler, 2, np.random.default_rng(9))
    b = sample_negatives((3, 4), sampler, 2, np.random.default_rng(9))
    assert a == b and len(a) == 2
    for i, j in a:
        assert (i == 3) != (j == 4)


def test_negatives_single_neighbour_used():
    kg = KnowledgeGraph.build(["a", "b"], ["r"], [(0, 0, 1)])
    emb = np.array([[1.0, 0.0], [0.0, 1.0]])
    sampler = NegativeSampler(kg, kg, emb, emb, n_candidates=5, source="graph")
    for i, j in sample_negatives((0, 0), sampler, 6, np.random.default_rng(0)):
        assert (i, j) in {(1, 0), (0, 1)}


def test_train_zero_steps_is_identity():
    src, tgt, se, te, _ = small_data()
    se, te = l2_normalize(se), l2_normalize(te)
    P = mine_pseudo_pairs(se, te, 0.8)
    out = train(se, te, src, tgt, P, build_candidate_set(se, te), TrainConfig(total_steps=0, gamma_mix=0.0))
    assert np.array_equal(out.src, se) and np.array_equal(out.tgt, te)


def test_train_without_pairs_warns():
    src, tgt, se, te, _ = small_data()
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        out = train(se, te, src, tgt, [], None, TrainConfig(total_steps=5))
    assert any("no positive pairs" in str(w.message) for w in rec)
    assert np.array_equal(out.params_src, se)


def test_train_deterministic_and_traced(tmp_path):
    src, tgt, se, te, _ = small_data()
    se, te = l2_normalize(se), l2_normalize(te)
    P, Q = mine_pseudo_pairs(se, te, 0.8), build_candidate_set(se, te)
    cfg = TrainConfig(total_steps=20, seed=4)
    a, b = train(se, te, src, tgt, P, Q, cfg), train(se, te, src, tgt, P, Q, cfg)
    assert np.array_equal(a.src, b.src) and a.trace == b.trace
    assert [t[3] for t in a.trace] == [cfg.weight(t) for t in range(20)]
    a.write_trace(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,loss_a,loss_g,w" and len(lines) == 21


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_named():
    src, tgt, se, te, _ = small_data()
    se, te = l2_normalize(se), l2_normalize(te)
    P = mine_pseudo_pairs(se, te, 0.8)
    with pytest.raises(DivergenceError, match="step"):
        train(se, te, src, tgt, P, None, TrainConfig(total_steps=3, learning_rate=1e308, lambda_margin=10))


def test_train_zero_noise_keeps_hits():
    src, tgt, se, te, gold = small_data(noise=0.0)
    se, te = l2_normalize(se), l2_normalize(te)
    P, Q = mine_pseudo_pairs(se, te), build_candidate_set(se, te)
    out = train(se, te, src, tgt, P, Q, TrainConfig(total_steps=200))
    before = embedding_rank_metrics(se, te, list(gold.pairs)).hits[1]
    after = embedding_rank_metrics(out.src, out.tgt, list(gold.pairs)).hits[1]
    assert after >= before


def test_train_improves_noisy_greedy_hits():
    src, tgt, se, te, gold = synth_kg_pair(SynthConfig(n_matchable=500, n_dangling_src=125, n_dangling_tgt=125,
                                                       dim=32, noise_sigma=0.8, edge_prob=0.01, seed=0))
    se, te = l2_normalize(se), l2_normalize(te)
    before = embedding_rank_metrics(se, te, list(gold.pairs)).hits[1]
    assert 0.6 <= before <= 0.8
    out = train(se, te, src, tgt, mine_pseudo_pairs(se, te, 0.7), build_candidate_set(se, te),
                TrainConfig(total_steps=1000, learning_rate=0.05, gamma_mix=0.6))
    assert embedding_rank_metrics(out.src, out.tgt, list(gold.pairs)).hits[1] > before


def test_fd_harness_quadratic():
    x = np.random.default_rng(0).standard_normal(12)
    assert finite_difference_check(lambda v: (float((v ** 2).sum()), 2 * v), x) < 1e-6


@pytest.mark.parametrize("kind", ["align", "guided", "combined"])
def test_gradient_check_passes(kind):
    rng = np.random.default_rng(11)
    for _ in range(3):
        rep = gradient_check(random_hinge_problem(rng), kind, rng=rng)
        assert not rep.inconclusive
        assert rep.passed, rep


def test_gradient_check_unknown_kind():
    with pytest.raises(ValueError):
        gradient_check(random_hinge_problem(np.random.default_rng(0)), "nope")
