import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgalign.kg import (CoverageError, DimensionError, GoldLabels, KnowledgeGraph, ParseError, SynthConfig,
                        UnknownEntityError, ValidationError, l2_normalize, load_embeddings, load_kg,
                        read_dangling, read_pairs, synth_kg_pair, write_embeddings, write_kg, write_pairs)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def tiny(tmp_path):
    ents = write(tmp_path / "ents.txt", "a\nb\n")
    triples = write(tmp_path / "triples.tsv", "a\tr\tb\n")
    return tmp_path, ents, triples


def test_load_minimal_kg(tiny):
    _, ents, triples = tiny
    kg = load_kg(triples, ents)
    assert kg.entity_ids == ("a", "b")
    assert kg.relation_ids == ("r",)
    assert kg.triples.tolist() == [[0, 0, 1]]
    assert kg.neighbors(0).tolist() == [1]
    assert kg.neighbors(1).tolist() == [0]


def test_duplicate_entity_rejected(tmp_path):
    ents = write(tmp_path / "e.txt", "a\na\n")
    triples = write(tmp_path / "t.tsv", "")
    with pytest.raises(ValidationError):
        load_kg(triples, ents)


def test_unknown_entity_in_triples(tmp_path):
    ents = write(tmp_path / "e.txt", "a\n")
    triples = write(tmp_path / "t.tsv", "a\tr\tzzz\n")
    with pytest.raises(UnknownEntityError, match="zzz"):
        load_kg(triples, ents)


def test_malformed_triple_line(tmp_path):
    ents = write(tmp_path / "e.txt", "a\nb\n")
    triples = write(tmp_path / "t.tsv", "a\tb\n")
    with pytest.raises(ParseError) as info:
        load_kg(triples, ents)
    assert info.value.lineno == 1


def test_self_loops_stay_out_of_adjacency():
    kg = KnowledgeGraph.build(["x", "y"], ["r"], [(0, 0, 0), (0, 0, 1)])
    assert kg.neighbors(0).tolist() == [1]


def test_embeddings_roundtrip_in_kg_order(tiny):
    d, ents, triples = tiny
    kg = load_kg(triples, ents)
    emb = write(d / "emb.tsv", "b\t4 5 6\na\t1 2 3\n")
    X = load_embeddings(emb, kg)
    assert X.tolist() == [[1, 2, 3], [4, 5, 6]]
    out = d / "emb2.tsv"
    rng = np.random.default_rng(0)
    Y = rng.standard_normal((2, 5))
    write_embeddings(out, kg.entity_ids, Y)
    assert np.array_equal(load_embeddings(out, kg), Y)


def test_embeddings_missing_entity_named(tiny):
    d, ents, triples = tiny
    kg = load_kg(triples, ents)
    emb = write(d / "emb.tsv", "a\t1 2 3\n")
    with pytest.raises(CoverageError) as info:
        load_embeddings(emb, kg)
    assert info.value.missing == ["b"]


def test_embeddings_dimension_and_finiteness(tiny):
    d, ents, triples = tiny
    kg = load_kg(triples, ents)
    with pytest.raises(DimensionError):
        load_embeddings(write(d / "e1.tsv", "a\t1 2 3\nb\t1 2\n"), kg)
    with pytest.raises(ParseError):
        load_embeddings(write(d / "e2.tsv", "a\t1 nan 3\nb\t1 2 3\n"), kg)
    with pytest.raises(ParseError):
        load_embeddings(write(d / "e3.tsv", "a\t1 x 3\nb\t1 2 3\n"), kg)


def test_l2_normalize_keeps_zero_rows():
    X = np.array([[3.0, 4.0], [0.0, 0.0]])
    Y = l2_normalize(X)
    assert np.allclose(Y[0], [0.6, 0.8])
    assert Y[1].tolist() == [0.0, 0.0]


def test_pairs_and_dangling_roundtrip(tiny):
    d, ents, triples = tiny
    kg = load_kg(triples, ents)
    write_pairs(d / "p.tsv", [(0, 1), (1, 0)], kg.entity_ids, kg.entity_ids, scores=[0.5, 0.25])
    assert read_pairs(d / "p.tsv", kg, kg) == [(0, 1), (1, 0)]
    assert read_pairs(d / "p.tsv", kg, kg, with_score=True) == [(0, 1, 0.5), (1, 0, 0.25)]
    write(d / "dang.txt", "b\n")
    assert read_dangling(d / "dang.txt", kg) == {1}


def test_gold_labels_validation():
    with pytest.raises(ValidationError):
        GoldLabels(((0, 0), (1, 0)), frozenset(), frozenset())
    with pytest.raises(ValidationError):
        GoldLabels(((0, 0),), frozenset({0}), frozenset())


def test_gold_split_partitions_everything():
    g = GoldLabels(tuple((i, i) for i in range(10)), frozenset({10, 11, 12}), frozenset({10}))
    tr, te = g.split(0.3, seed=1)
    assert sorted(tr.pairs + te.pairs) == sorted(g.pairs)
    assert len(tr.pairs) == 3
    assert tr.dangling_src | te.dangling_src == g.dangling_src
    assert not tr.dangling_src & te.dangling_src


def test_synth_counts():
    src, tgt, se, te, gold = synth_kg_pair(SynthConfig(n_matchable=100, n_dangling_src=25, n_dangling_tgt=25))
    assert src.n_entities == 125 and tgt.n_entities == 125
    assert len(gold.pairs) == 100
    assert len(gold.dangling_src) == 25 and len(gold.dangling_tgt) == 25
    assert se.shape == (125, 32) and te.shape == (125, 32)


def test_synth_zero_noise_pairs_identical():
    _, _, se, te, gold = synth_kg_pair(SynthConfig(n_matchable=50, n_dangling_src=5, n_dangling_tgt=7,
                                                   noise_sigma=0.0))
    for i, j in gold.pairs:
        assert np.array_equal(se[i], te[j])


def test_synth_is_deterministic():
    cfg = SynthConfig(n_matchable=60, n_dangling_src=10, n_dangling_tgt=5, edge_prob=0.05, seed=3)
    a, b = synth_kg_pair(cfg), synth_kg_pair(cfg)
    assert a[0] == b[0] and a[1] == b[1]
    assert np.array_equal(a[2], b[2]) and np.array_equal(a[3], b[3])
    assert a[4] == b[4]


def test_synth_core_edges_correspond():
    src, tgt, _, _, gold = synth_kg_pair(SynthConfig(n_matchable=80, n_dangling_src=0, n_dangling_tgt=0,
                                                     edge_prob=0.1, seed=2))
    to_t = dict(gold.pairs)
    s_edges = {frozenset((to_t[h], to_t[t])) for h, _, t in src.triples}
    t_edges = {frozenset((h, t)) for h, _, t in tgt.triples}
    assert s_edges == t_edges


def test_write_kg_roundtrip(tmp_path):
    src, *_ = synth_kg_pair(SynthConfig(n_matchable=30, n_dangling_src=3, n_dangling_tgt=3, edge_prob=0.1))
    write_kg(src, tmp_path / "t.tsv", tmp_path / "e.txt")
    again = load_kg(tmp_path / "t.tsv", tmp_path / "e.txt")
    assert again.entity_ids == src.entity_ids
    assert {(src.entity_ids[h], src.relation_ids[r], src.entity_ids[t]) for h, r, t in src.triples} == \
        {(again.entity_ids[h], again.relation_ids[r], again.entity_ids[t]) for h, r, t in again.triples}


@settings(max_examples=30, deadline=None)
@given(n=st.integers(0, 30), ds=st.integers(0, 10), dt=st.integers(0, 10),
       p=st.floats(0, 0.3), seed=st.integers(0, 2 ** 16))
def test_synth_gold_invariants_and_symmetric_adjacency(n, ds, dt, p, seed):
    src, tgt, _, _, gold = synth_kg_pair(SynthConfig(n_matchable=n, n_dangling_src=ds, n_dangling_tgt=dt,
                                                     edge_prob=p, seed=seed, dim=4))
    assert len(gold.pairs) == n
    assert {i for i, _ in gold.pairs} | gold.dangling_src == set(range(src.n_entities))
    assert {j for _, j in gold.pairs} | gold.dangling_tgt == set(range(tgt.n_entities))
    for kg in (src, tgt):
        for i in range(kg.n_entities):
            for j in kg.neighbors(i):
                assert i in kg.neighbors(j)
