import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmtc.corpus import Corpus, EmbeddingTable, Example, LabelTree
from xmtc.errors import DegenerateInputError, EmptyTeacher, ParseError
from xmtc.teacher import (NeighborIndex, TeacherKnowledge, ZeroVectorWarning, build_all_teacher_knowledge,
                          build_teacher_label_set, cosine_score, encode_teacher_knowledge, load_teacher_cache,
                          nearest_neighbors, save_teacher_cache, vectorize_text)


def multi_hot(labels, n):
    v = np.zeros(n, dtype=np.int8)
    v[list(labels)] = 1
    return v


def test_vectorize_text():
    table = EmbeddingTable(np.array([[1.0, 0.0], [1.0, 2.0], [-1.0, -2.0]]))
    assert np.array_equal(vectorize_text(Example(0, (0,), ()), table), [1.0, 0.0])
    assert np.array_equal(vectorize_text(Example(0, (1, 2), ()), table), [0.0, 0.0])
    assert np.array_equal(vectorize_text(Example(0, (0, 1), ()), table), [1.0, 1.0])
    with pytest.raises(DegenerateInputError):
        vectorize_text(Example(0, (), ()), table)


def test_cosine_values():
    assert cosine_score(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 1.0
    assert cosine_score(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    assert abs(cosine_score(np.array([1.0, 1.0]), np.array([1.0, 0.0])) - 0.70710678) < 1e-8
    with pytest.warns(ZeroVectorWarning):
        assert cosine_score(np.zeros(2), np.array([1.0, 0.0])) == 0.0


@given(st.integers(0, 2**31), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_scale_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=5), rng.normal(size=5)
    assert abs(cosine_score(a * x, b * y) - cosine_score(x, y)) < 1e-12


def test_self_is_nearest_unless_excluded():
    q = np.array([1.0, 0.0])
    pool = [(0, q), (1, np.array([0.0, 1.0]))]
    r = nearest_neighbors(q, 0, pool, 1, exclude_self=False)
    assert r.ids == (0,) and r.scores == (1.0,)
    assert nearest_neighbors(q, 0, pool, 1, exclude_self=True).ids == (1,)


def test_k_checks():
    pool = [(0, np.ones(2)), (1, np.ones(2))]
    with pytest.raises(ValueError):
        nearest_neighbors(np.ones(2), 0, pool, 0)
    with pytest.raises(ValueError):
        nearest_neighbors(np.ones(2), 0, pool, 2, exclude_self=True)


def oracle_neighbors(query, query_id, pool, k, exclude_self):
    scored = []
    for i, v in pool:
        if exclude_self and i == query_id:
            continue
        s = float(np.dot(query, v)) / (float(np.linalg.norm(query)) * float(np.linalg.norm(v)))
        scored.append((-s, i))
    scored.sort()
    return [i for _, i in scored[:k]], [-s for s, _ in scored[:k]]


def test_five_random_vectors_match_sort(rng):
    pool = [(i, rng.normal(size=4)) for i in range(5)]
    q = rng.normal(size=4)
    r = nearest_neighbors(q, 99, pool, 3)
    ids, scores = oracle_neighbors(q, 99, pool, 3, True)
    assert list(r.ids) == ids
    assert np.allclose(r.scores, scores, atol=1e-12, rtol=0)


def test_ties_break_to_lower_id():
    v = np.array([1.0, 1.0])
    pool = [(3, v), (1, v), (2, v)]
    assert nearest_neighbors(v, 9, pool, 2).ids == (1, 2)


# -- label set ---------------------------------------------------------------


def oracle_label_set(neighbor_label_lists, tree):
    chosen = set()
    for labels in neighbor_label_lists:
        for j in labels:
            if tree.par(j) is not None:
                chosen |= {j, tree.par(j)}
    return tuple(sorted(chosen))


def test_label_set_hand_traces():
    a, b, c, p = 1, 2, 3, 0
    tree = LabelTree(4, {a: p, c: p})
    assert build_teacher_label_set(multi_hot([a, b], 4), tree) == (p, a)
    assert build_teacher_label_set(np.zeros(4), tree) == ()
    assert build_teacher_label_set(multi_hot([a, c], 4), tree) == (p, a, c)
    assert build_teacher_label_set(multi_hot([a, b], 4), tree, include_roots=True) == (p, a, b)


def test_encoding_hand_values():
    table = EmbeddingTable(np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 3.0], [5.0, 1.0]]))
    tree = LabelTree(3, {}, {0: (0, 1), 1: (2,), 2: ()})
    assert np.array_equal(encode_teacher_knowledge([0], tree, table), [[0.5, 1.0]])
    assert np.array_equal(encode_teacher_knowledge([0, 1], tree, table), [[0.5, 1.0], [3.0, 3.0]])
    assert np.array_equal(encode_teacher_knowledge([0, 1], tree, table, pool="global"), [[1.75, 2.0]])
    with pytest.raises(EmptyTeacher):
        encode_teacher_knowledge([2], tree, table)
    with pytest.raises(EmptyTeacher):
        encode_teacher_knowledge([], tree, table)


def test_single_example_neighbor_shares_labels():
    table = EmbeddingTable(np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]]))
    tree = LabelTree(4, {2: 0, 3: 1}, {0: (0,), 1: (1,), 2: (2,), 3: (0, 2)})
    corpus = Corpus((Example(0, (0,), (2, 3)),), 4, "test")
    pool = [Corpus((Example(0, (1,), (2, 3)), Example(1, (2,), (0,))), 4, "train")]
    t = build_all_teacher_knowledge(corpus, pool, tree, table, k=1)[0]
    assert t.label_set == (0, 1, 2, 3)
    assert t.encoding.shape == (4, 2) and not t.empty


def test_identical_examples_select_each_other():
    table = EmbeddingTable(np.array([[1.0, 0.0], [0.0, 1.0]]))
    tree = LabelTree(3, {1: 0, 2: 0}, {0: (0,), 1: (0,), 2: (1,)})
    corpus = Corpus((Example(0, (0,), (1,)), Example(1, (0,), (2,))), 3, "train")
    ts = build_all_teacher_knowledge(corpus, [corpus], tree, table, k=1)
    assert ts[0].label_set == (0, 2) and ts[1].label_set == (0, 1)
    with pytest.raises(ValueError):
        build_all_teacher_knowledge(corpus, [corpus], tree, table, k=0)


def test_empty_teacher_becomes_zero_row():
    table = EmbeddingTable(np.array([[1.0, 0.0], [0.0, 1.0]]))
    tree = LabelTree(2, {}, {})
    corpus = Corpus((Example(0, (0,), (0,)), Example(1, (1,), (1,))), 2, "train")
    ts = build_all_teacher_knowledge(corpus, [corpus], tree, table, k=1)
    assert all(t.empty and np.array_equal(t.encoding, np.zeros((1, 2))) for t in ts)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_index_agrees_with_pairwise_search(seed):
    rng = np.random.default_rng(seed)
    n, L, d = int(rng.integers(3, 30)), 8, 4
    table = EmbeddingTable(rng.normal(size=(10, d)))
    corpus = Corpus(tuple(Example(i, tuple(int(t) for t in rng.integers(0, 10, size=3)),
                                  tuple(sorted(set(int(x) for x in rng.integers(0, L, size=2)))))
                          for i in range(n)), L, "train")
    index = NeighborIndex([corpus], table)
    k = int(rng.integers(1, n))
    vecs = [(ex.id, vectorize_text(ex, table)) for ex in corpus]
    for i in range(n):
        a = index.query(vecs[i][1], k, exclude=i)
        b = nearest_neighbors(vecs[i][1], i, vecs, k)
        # the two paths sum in different orders, so near-ties may swap
        assert np.allclose(a.scores, b.scores, atol=1e-12, rtol=0)
        every = nearest_neighbors(vecs[i][1], i, vecs, n - 1)
        full = dict(zip(every.ids, every.scores))
        assert all(full[j] >= b.scores[-1] - 1e-12 for j in a.ids)


def test_cache_round_trip_and_threads(synth_dataset, tmp_path):
    ds = synth_dataset
    one = build_all_teacher_knowledge(ds.splits["test"], [ds.splits["train"]], ds.tree, ds.table, threads=1)
    four = build_all_teacher_knowledge(ds.splits["test"], [ds.splits["train"]], ds.tree, ds.table, threads=4)
    assert one == four
    save_teacher_cache(one, tmp_path / "t")
    assert load_teacher_cache(tmp_path / "t") == one


def test_cache_rejects_truncation(tmp_path):
    ts = [TeacherKnowledge(0, (1, 2), np.ones((2, 3)))]
    tsv, binf = save_teacher_cache(ts, tmp_path / "t")
    binf.write_bytes(binf.read_bytes()[:-4])
    with pytest.raises(ParseError):
        load_teacher_cache(tmp_path / "t")
