import numpy as np
import pytest

from dynst import autodiff as ad
from dynst import mask as mk
from dynst.models import (MessagePassingNet, NodeMlp, compact_forward, forward,
                          load_model, save_model)
from dynst.morph import Graph


def all_active_mask(u):
    return mk.SensorMask(scores=np.ones(u), mode=mk.BINARY,
                         active=np.arange(u), unit_rows=[np.array([i]) for i in range(u)])


def mask_without(u, pruned):
    scores = np.ones(u)
    active = [i for i in range(u) if i not in pruned]
    for p in pruned:
        scores[p] = 0.0
    return mk.SensorMask(scores=scores, mode=mk.BINARY, active=np.array(active),
                         unit_rows=[np.array([i]) for i in range(u)])


def zero_params(model):
    for _, p in model.named_params():
        p.values[:] = 0.0


def path_graph_mpn():
    g = Graph.undirected(2, [(0, 1)])
    model = MessagePassingNet(1, 1, 1, 1, np.random.default_rng(0))
    model.w_self[0].values[:] = 1.0
    model.w_nbr[0].values[:] = 1.0
    model.biases[0].values[:] = 0.0
    model.w_out.values[:] = 1.0
    model.b_out.values[:] = 0.0
    return g, model


def test_zero_weights_zero_predictions():
    rng = np.random.default_rng(0)
    model = NodeMlp(3, [4], 2, rng)
    zero_params(model)
    out = forward(model, ad.constant(rng.normal(size=(5, 3))))
    assert np.array_equal(out.values, np.zeros((5, 2)))
    g = Graph.undirected(3, [(0, 1), (1, 2)])
    mpn = MessagePassingNet(3, 4, 2, 2, rng)
    zero_params(mpn)
    out = forward(mpn, ad.constant(rng.normal(size=(3, 3))), graph=g)
    assert np.array_equal(out.values, np.zeros((3, 2)))


def test_path_graph_hand_example():
    g, model = path_graph_mpn()
    out = forward(model, ad.constant([[1.0], [3.0]]), graph=g,
                  mask=all_active_mask(2))
    # hidden = relu(self + mean over single neighbor), readout is identity
    assert np.array_equal(out.values, [[4.0], [4.0]])


def test_path_graph_pruned_node():
    g, model = path_graph_mpn()
    m = mask_without(2, [1])
    masked = mk.apply_mask(m, ad.constant([[1.0], [3.0]]))
    out = forward(model, masked, graph=g, mask=m)
    # node 0 has no active neighbor -> aggregation 0; node 1 re-zeroed
    assert np.array_equal(out.values, [[1.0], [0.0]])
    comp = compact_forward(model, masked, graph=g, mask=m)
    assert np.array_equal(comp.values, [[1.0]])


def test_compact_all_active_identical():
    rng = np.random.default_rng(1)
    model = NodeMlp(4, [8], 3, rng)
    x = ad.constant(rng.normal(size=(6, 4)))
    m = all_active_mask(6)
    assert np.array_equal(compact_forward(model, x, mask=m).values,
                          forward(model, x, mask=m).values)


def test_compact_rejects_dense_mask():
    model = NodeMlp(2, [2], 1, np.random.default_rng(0))
    with pytest.raises(ValueError, match="binary"):
        compact_forward(model, ad.constant(np.zeros((3, 2))), mask=mk.init_mask(3))


def random_graph(rng, n):
    pairs = set()
    for i in range(n):
        j = int(rng.integers(0, n))
        if i != j:
            pairs.add((min(i, j), max(i, j)))
    extra = rng.integers(0, n, size=(n, 2))
    for i, j in extra:
        if i != j:
            pairs.add((min(int(i), int(j)), max(int(i), int(j))))
    return Graph.undirected(n, sorted(pairs))


@pytest.mark.parametrize("backbone", ["mlp", "mpn"])
def test_masked_compacted_equivalence_random(backbone):
    rng = np.random.default_rng(2)
    for _ in range(40):
        n = int(rng.integers(4, 24))
        fin = int(rng.integers(1, 6))
        fout = int(rng.integers(1, 4))
        if backbone == "mlp":
            model = NodeMlp(fin, [int(rng.integers(2, 10))], fout, rng)
            g = None
        else:
            model = MessagePassingNet(fin, int(rng.integers(2, 8)), fout,
                                      int(rng.integers(1, 4)), rng)
            g = random_graph(rng, n)
        n_active = int(rng.integers(1, n + 1))
        active = np.sort(rng.choice(n, size=n_active, replace=False))
        m = mask_without(n, [i for i in range(n) if i not in active.tolist()])
        x = mk.apply_mask(m, ad.constant(rng.normal(size=(2, n, fin))))
        full = forward(model, x, graph=g, mask=m).values
        comp = compact_forward(model, x, graph=g, mask=m).values
        rows = m.active_row_indices()
        assert np.abs(full[:, rows, :] - comp).max() <= 1e-9


def test_mpn_permutation_equivariance():
    rng = np.random.default_rng(3)
    n = 7
    g = random_graph(rng, n)
    model = MessagePassingNet(3, 5, 2, 2, rng)
    x = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    g_perm = Graph.undirected(n, sorted({(min(int(perm[u]), int(perm[v])),
                                          max(int(perm[u]), int(perm[v])))
                                         for u, v in g.edges}))
    pruned = [2, 5]
    m = mask_without(n, pruned)
    m_perm = mask_without(n, [int(perm[p]) for p in pruned])
    x_perm = np.empty_like(x)
    x_perm[perm] = x
    xm = mk.apply_mask(m, ad.constant(x))
    xm_perm = mk.apply_mask(m_perm, ad.constant(x_perm))
    out = forward(model, xm, graph=g, mask=m).values
    out_perm = forward(model, xm_perm, graph=g_perm, mask=m_perm).values
    assert np.abs(out_perm[perm] - out).max() < 1e-9


def test_nodemlp_is_strictly_per_unit():
    rng = np.random.default_rng(4)
    model = NodeMlp(3, [6], 2, rng)
    x = rng.normal(size=(5, 3))
    base = forward(model, ad.constant(x)).values
    x2 = x.copy()
    x2[2] += 1.0
    out = forward(model, ad.constant(x2)).values
    changed = np.abs(out - base).max(axis=1) > 0
    assert changed[2]
    assert not changed[[0, 1, 3, 4]].any()


def test_forward_deterministic():
    rng = np.random.default_rng(5)
    g = random_graph(rng, 6)
    model = MessagePassingNet(2, 4, 2, 2, rng)
    x = ad.constant(rng.normal(size=(6, 2)))
    a = forward(model, x, graph=g).values
    b = forward(model, x, graph=g).values
    assert np.array_equal(a, b)


def test_width_mismatch_errors():
    model = NodeMlp(3, [4], 2, np.random.default_rng(0))
    with pytest.raises(ValueError, match="width"):
        forward(model, ad.constant(np.zeros((5, 2))))
    g = Graph.undirected(2, [(0, 1)])
    mpn = MessagePassingNet(3, 4, 2, 1, np.random.default_rng(0))
    with pytest.raises(ValueError, match="graph"):
        forward(mpn, ad.constant(np.zeros((2, 3))))
    with pytest.raises(ValueError, match="nodes"):
        forward(mpn, ad.constant(np.zeros((3, 3))), graph=g)


@pytest.mark.parametrize("backbone", ["mlp", "mpn"])
def test_checkpoint_round_trip(tmp_path, backbone):
    rng = np.random.default_rng(6)
    if backbone == "mlp":
        model = NodeMlp(3, [5, 4], 2, rng)
        g = None
        x = ad.constant(rng.normal(size=(4, 3)))
    else:
        model = MessagePassingNet(3, 5, 2, 2, rng)
        g = random_graph(rng, 4)
        x = ad.constant(rng.normal(size=(4, 3)))
    path = tmp_path / "model.ckpt"
    save_model(model, path)
    loaded = load_model(path)
    for (n1, p1), (n2, p2) in zip(model.named_params(), loaded.named_params()):
        assert n1 == n2
        assert np.array_equal(p1.values, p2.values)
    assert np.array_equal(forward(model, x, graph=g).values,
                          forward(loaded, x, graph=g).values)


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint\n")
    with pytest.raises(ValueError, match="dynst-ckpt"):
        load_model(path)
