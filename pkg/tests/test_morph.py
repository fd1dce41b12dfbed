import numpy as np
import pytest

from dynst.morph import (GRAPH, IMAGE, Graph, STSeries, morph, patchify,
                         unmorph, unmorph_matrix)


def random_series(rng, layout):
    if layout == IMAGE:
        dims = tuple(int(d) for d in rng.integers(1, 5, size=4))
    else:
        dims = tuple(int(d) for d in rng.integers(1, 6, size=3))
    return STSeries(layout, dims, rng.normal(size=dims))


def test_singleton_image():
    s = STSeries(IMAGE, (1, 1, 1, 1), [5.0])
    assert np.array_equal(morph(s).matrix, [[5.0]])


def test_image_index_formula():
    t_n, c_n, h_n, w_n = 2, 1, 2, 2
    vals = np.empty((t_n, c_n, h_n, w_n))
    for t in range(t_n):
        for h in range(h_n):
            for w in range(w_n):
                vals[t, 0, h, w] = 100 * t + 10 * h + w
    m = morph(STSeries(IMAGE, vals.shape, vals))
    assert np.array_equal(m.matrix, [[0, 100], [1, 101], [10, 110], [11, 111]])
    # brute-force oracle over every (t,c,h,w) index
    for t in range(t_n):
        for c in range(c_n):
            for h in range(h_n):
                for w in range(w_n):
                    assert m.matrix[h * w_n + w, t * c_n + c] == vals[t, c, h, w]


def test_graph_shape_matches_large_deployment():
    # 16384 sensors, 12 input steps, 2 variables -> 24 folded columns
    s = STSeries(GRAPH, (12, 16384, 2), np.zeros(12 * 16384 * 2))
    m = morph(s)
    assert (m.rows, m.cols) == (16384, 24)
    assert m.matrix.shape == (16384, 24)


def test_graph_index_formula():
    t_n, n_n, d_n = 2, 3, 2
    vals = np.arange(t_n * n_n * d_n, dtype=float).reshape(t_n, n_n, d_n)
    m = morph(STSeries(GRAPH, vals.shape, vals))
    for t in range(t_n):
        for n in range(n_n):
            for d in range(d_n):
                assert m.matrix[n, t * d_n + d] == vals[t, n, d]


def test_round_trip_hand_case():
    vals = np.arange(8, dtype=float).reshape(2, 1, 2, 2)
    s = STSeries(IMAGE, (2, 1, 2, 2), vals)
    back = unmorph(morph(s))
    assert np.array_equal(back.values, s.values)
    assert back.dims == s.dims


def test_round_trip_graph_case():
    vals = np.arange(24, dtype=float).reshape(3, 4, 2)
    s = STSeries(GRAPH, (3, 4, 2), vals)
    back = unmorph(morph(s))
    assert np.array_equal(back.values, s.values)


def test_round_trip_random_series_bit_exact():
    rng = np.random.default_rng(0)
    for i in range(200):
        layout = IMAGE if i % 2 == 0 else GRAPH
        s = random_series(rng, layout)
        back = unmorph(morph(s))
        assert back.dims == s.dims
        assert np.array_equal(back.values, s.values)


def test_unmorph_requires_provenance():
    m = morph(STSeries(IMAGE, (1, 1, 2, 2), np.zeros(4)))
    m.source_dims = ()
    with pytest.raises(ValueError, match="provenance"):
        unmorph(m)


def test_unmorph_matrix_matches_unmorph():
    rng = np.random.default_rng(5)
    s = random_series(rng, IMAGE)
    m = morph(s)
    assert np.array_equal(unmorph_matrix(m.matrix, IMAGE, s.dims), s.values)


def test_time_permutation_moves_columns_not_rows():
    rng = np.random.default_rng(1)
    vals = rng.normal(size=(4, 2, 3, 3))
    s = STSeries(IMAGE, vals.shape, vals)
    perm = [2, 0, 3, 1]
    s_perm = STSeries(IMAGE, vals.shape, vals[perm])
    m, mp = morph(s), morph(s_perm)
    c = 2
    for new_t, old_t in enumerate(perm):
        assert np.array_equal(mp.matrix[:, new_t * c:(new_t + 1) * c],
                              m.matrix[:, old_t * c:(old_t + 1) * c])


def test_patchify_unit_patches():
    m = morph(STSeries(IMAGE, (1, 1, 2, 2), np.zeros(4)))
    assert patchify(m, 1) == [[0], [1], [2], [3]]


def test_patchify_whole_image():
    m = morph(STSeries(IMAGE, (1, 1, 2, 2), np.zeros(4)))
    assert patchify(m, 2) == [[0, 1, 2, 3]]


def test_patchify_block_membership():
    m = morph(STSeries(IMAGE, (1, 1, 4, 4), np.zeros(16)))
    sets = patchify(m, 2)
    assert len(sets) == 4
    assert sets[0] == [0, 1, 4, 5]
    # enumeration oracle: row = h*W + w, block = (h//p)*(W//p) + w//p
    expect = [[], [], [], []]
    for h in range(4):
        for w in range(4):
            expect[(h // 2) * 2 + (w // 2)].append(h * 4 + w)
    assert sets == expect


def test_patchify_partitions_exactly():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = int(rng.choice([1, 2, 3]))
        h = p * int(rng.integers(1, 4))
        w = p * int(rng.integers(1, 4))
        m = morph(STSeries(IMAGE, (2, 1, h, w), np.zeros(2 * h * w)))
        sets = patchify(m, p)
        flat = [r for s in sets for r in s]
        assert len(flat) == h * w
        assert sorted(flat) == list(range(h * w))
        assert all(len(s) == p * p for s in sets)


def test_patchify_rejects_non_dividing_patch():
    m = morph(STSeries(IMAGE, (1, 1, 4, 6), np.zeros(24)))
    with pytest.raises(ValueError, match="patch size 4 does not divide grid 4x6"):
        patchify(m, 4)


def test_patchify_rejects_graph_layout():
    m = morph(STSeries(GRAPH, (2, 3, 1), np.zeros(6)))
    with pytest.raises(ValueError, match="image"):
        patchify(m, 1)


def test_graph_validation():
    g = Graph.undirected(4, [(0, 1), (1, 2)])
    assert g.symmetric
    assert (0, 1) in g.edges and (1, 0) in g.edges
    with pytest.raises(ValueError, match="self-loop"):
        Graph(3, [(1, 1)])
    with pytest.raises(ValueError, match="out of range"):
        Graph(2, [(0, 5)])
    with pytest.raises(ValueError, match="reverse edge"):
        Graph(3, [(0, 1)], symmetric=True)


def test_series_validation():
    with pytest.raises(ValueError, match="does not match dims"):
        STSeries(IMAGE, (1, 1, 2, 2), np.zeros(5))
    with pytest.raises(ValueError, match="positive dims"):
        STSeries(GRAPH, (1, 0, 2), np.zeros(0))
    with pytest.raises(ValueError, match="unknown layout"):
        STSeries("video", (1, 1, 2, 2), np.zeros(4))
