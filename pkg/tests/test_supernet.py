import itertools
import math

import numpy as np
import pytest

from gradcheck import tape_vs_numeric
from hanf.diffcore import PRIMITIVES, Tensor, cross_entropy, init_params, ops, primitive_param_specs
from hanf.supernet import (
    CellSpec,
    EvalNet,
    Genotype,
    NetworkSpec,
    SuperNet,
    cell_edges,
    cell_forward,
    discretize,
    mixed_op_forward,
)

SMALL = NetworkSpec(cell_count=3, channels=4, num_classes=3, in_channels=1)


def _edge_params(c, stride, seed, prims=PRIMITIVES):
    out = {}
    for i, p in enumerate(prims):
        specs = primitive_param_specs(p, c, stride)
        out[p] = init_params([(f"{p}.{s}", k, sh) for s, k, sh in specs], seed + i)
    return out


# -- mixed operation ------------------------------------------------------------


def test_mixed_op_two_primitive_weights():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 5, 5)))
    arch = Tensor(np.array([math.log(3.0), 0.0]))
    out = mixed_op_forward(None, x, arch, {}, primitives=("identity", "zero"))
    np.testing.assert_allclose(out.data, 0.75 * x.data, rtol=1e-14)


def test_mixed_op_uniform_is_mean_of_primitives():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)))
    params = _edge_params(3, 1, 5)
    out = mixed_op_forward(None, x, Tensor(np.zeros(len(PRIMITIVES))), params)
    from hanf.diffcore import forward_primitive

    ref = sum(forward_primitive(None, p, x, params[p]).data for p in PRIMITIVES) / len(PRIMITIVES)
    np.testing.assert_allclose(out.data, ref, atol=1e-13)


def test_mixed_op_dominant_identity():
    x = Tensor(np.random.default_rng(2).normal(size=(1, 2, 4, 4)))
    a = np.zeros(len(PRIMITIVES))
    a[PRIMITIVES.index("identity")] = 1000.0
    out = mixed_op_forward(None, x, Tensor(a), _edge_params(2, 1, 0))
    np.testing.assert_array_equal(out.data, x.data)


def test_mixed_op_rejects_wrong_arch_length():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError, match="edge arch"):
        mixed_op_forward(None, x, Tensor(np.zeros(3)), {})


def test_mixed_op_arch_gradient():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 2, 5, 5)))
    arch = Tensor(rng.normal(size=len(PRIMITIVES)), requires_grad=True)
    params = _edge_params(2, 1, 9)
    leaves = [arch] + [t for ts in params.values() for t in ts if t.name.endswith(("pw1", "dw"))]

    def build(tape):
        out = mixed_op_forward(tape, x, arch, params)
        return ops.sum(tape, ops.mul(tape, out, out))

    assert tape_vs_numeric(build, leaves) < 1e-4


# -- cells ------------------------------------------------------------------------


def test_cell_edges_enumeration():
    assert cell_edges(4) == [(0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]
    assert len(cell_edges(5)) == 9
    with pytest.raises(ValueError):
        cell_edges(2)


@pytest.mark.parametrize("count,expected", [(8, (2, 5)), (3, (1, 2)), (6, (2, 4))])
def test_reduction_positions(count, expected):
    assert NetworkSpec(cell_count=count).reduction_indices == expected


def test_network_spec_rejects_single_cell():
    with pytest.raises(ValueError):
        NetworkSpec(cell_count=1)


def test_all_zero_cell_outputs_zero():
    net = SuperNet(SMALL, CellSpec(nodes=4), seed=0)
    zi = PRIMITIVES.index("zero")
    for k in net.arch:
        a = np.zeros(net.arch[k].shape)
        a[:, zi] = 1000.0
        net.arch[k].data = a
    rng = np.random.default_rng(0)
    s = Tensor(rng.normal(size=(2, 4, 8, 8)))
    out = cell_forward(None, net, 0, s, s)
    assert out.shape == (2, 8, 8, 8)
    np.testing.assert_array_equal(out.data, 0.0)


def test_three_node_cell_hand_expansion():
    # one intermediate node: out = mixed(s0') + mixed(s1') with preprocessed inputs
    net = SuperNet(SMALL, CellSpec(nodes=3), seed=4)
    net.arch["normal"].data = np.random.default_rng(4).normal(size=net.arch["normal"].shape)
    rng = np.random.default_rng(5)
    s0 = Tensor(rng.normal(size=(2, 4, 8, 8)))
    s1 = Tensor(rng.normal(size=(2, 4, 8, 8)))
    cell = net._cells[0]
    t0, t1 = net._preprocess(None, cell, s0, s1)
    w = ops.softmax(None, net.arch["normal"]).data
    expect = 0.0
    for e, (src, t) in enumerate([(0, t0), (1, t1)]):
        for p_i, p in enumerate(PRIMITIVES):
            if p != "zero":
                expect = expect + w[e, p_i] * net._apply(None, cell, p, src, 2, t).data
    out = cell_forward(None, net, 0, s0, s1)
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_reduction_cell_halves_resolution():
    net = SuperNet(SMALL, CellSpec(nodes=4), seed=0)
    out = net.forward(None, np.random.default_rng(0).normal(size=(2, 1, 8, 8)))
    assert out.shape == (2, 3)
    assert net._cells[1].reduction and net._cells[1].channels == 8


def test_supernet_arch_gradient_matches_finite_differences():
    spec = NetworkSpec(cell_count=2, channels=2, num_classes=3)
    net = SuperNet(spec, CellSpec(nodes=4), seed=1)
    rng = np.random.default_rng(1)
    for t in net.arch.values():
        t.data = 0.5 * rng.normal(size=t.shape)
    x = rng.normal(size=(3, 1, 6, 6))
    y = np.array([0, 1, 2])

    def build(tape):
        return cross_entropy(tape, net.forward(tape, x), y)

    assert tape_vs_numeric(build, list(net.arch.values())) < 1e-4


def test_supernet_is_deterministic():
    x = np.random.default_rng(7).normal(size=(2, 1, 8, 8))
    a = SuperNet(SMALL, CellSpec(nodes=4), seed=3)
    b = SuperNet(SMALL, CellSpec(nodes=4), seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    np.testing.assert_array_equal(a.forward(None, x).data, b.forward(None, x).data)


def test_weights_roundtrip_and_shape_check():
    net = SuperNet(SMALL, CellSpec(nodes=4), seed=0)
    w = net.get_weights()
    w["stem.w"] = w["stem.w"] + 1.0
    net.set_weights(w)
    np.testing.assert_array_equal(net.params["stem.w"].data, w["stem.w"])
    w["stem.w"] = np.zeros((1, 1))
    with pytest.raises(ValueError, match="stem.w"):
        net.set_weights(w)


# -- discretization -----------------------------------------------------------------


def _brute_force(weights, nodes, k):
    """Score every (edge, primitive) pair, then per node keep the k best edges."""
    probs = np.exp(weights - weights.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    edges = cell_edges(nodes)
    out = []
    for dst in range(2, nodes):
        pairs = [
            (probs[e, p], p, src)
            for e, (src, d) in enumerate(edges)
            if d == dst
            for p, name in enumerate(PRIMITIVES)
            if name != "zero"
        ]
        best_per_edge = {}
        for score, p, src in pairs:
            cur = best_per_edge.get(src)
            if cur is None or score > cur[0] or (score == cur[0] and p < cur[1]):
                best_per_edge[src] = (score, p)
        choices = list(best_per_edge.items())
        best = None
        for combo in itertools.combinations(choices, min(k, dst)):
            key = sorted(((-s, p, src) for src, (s, p) in combo))
            if best is None or key < best[0]:
                best = (key, combo)
        out.extend(sorted(((PRIMITIVES[p], src, dst) for src, (s, p) in best[1]), key=lambda t: t[1]))
    return tuple(out)


def test_discretize_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(10):
        arch = {k: rng.normal(size=(9, len(PRIMITIVES))) for k in ("normal", "reduce")}
        g = discretize(arch, 5, k=2)
        assert g.normal == _brute_force(arch["normal"], 5, 2)
        assert g.reduce == _brute_force(arch["reduce"], 5, 2)


def test_discretize_zero_arch_tie_break():
    # all weights equal: lowest primitive index, lowest sources win
    g = discretize({"normal": np.zeros((9, 8)), "reduce": np.zeros((9, 8))}, 5)
    first = PRIMITIVES[0]
    assert g.normal == ((first, 0, 2), (first, 1, 2), (first, 0, 3), (first, 1, 3), (first, 0, 4), (first, 1, 4))


def test_discretize_ignores_zero_primitive():
    a = np.zeros((5, 8))
    a[:, PRIMITIVES.index("zero")] = 50.0
    a[4, PRIMITIVES.index("max_pool_3x3")] = 1.0  # edge 2 -> 3
    g = discretize({"normal": a, "reduce": a}, 4, k=2)
    assert ("max_pool_3x3", 2, 3) in g.normal
    assert all(p != "zero" for p, _, _ in g.normal)


def test_discretize_shift_invariant():
    rng = np.random.default_rng(2)
    arch = {k: rng.normal(size=(9, 8)) for k in ("normal", "reduce")}
    shifted = {k: v + 3.5 for k, v in arch.items()}
    assert discretize(arch, 5) == discretize(shifted, 5)


def test_genotype_json_roundtrip(tmp_path):
    g = discretize({k: np.random.default_rng(1).normal(size=(9, 8)) for k in ("normal", "reduce")}, 5)
    assert Genotype.from_json(g.to_json()) == g
    path = tmp_path / "g.json"
    g.save(path)
    assert Genotype.load(path) == g


@pytest.mark.parametrize(
    "normal,msg",
    [
        ((("zero", 0, 2), ("identity", 1, 2)), "not allowed"),
        ((("identity", 0, 2),), "expected 2"),
        ((("identity", 0, 2), ("identity", 0, 2)), "duplicate"),
        ((("identity", 2, 2), ("identity", 0, 2)), "invalid"),
    ],
)
def test_genotype_validation(normal, msg):
    ok = (("identity", 0, 2), ("identity", 1, 2))
    with pytest.raises(ValueError, match=msg):
        Genotype(normal=normal, reduce=ok, nodes=3)


# -- evaluation network ------------------------------------------------------------------


def _one_hot_arch(net, rng):
    allowed = [i for i, p in enumerate(PRIMITIVES) if p != "zero"]
    for t in net.arch.values():
        a = np.zeros(t.shape)
        a[np.arange(t.shape[0]), rng.choice(allowed, size=t.shape[0])] = 1000.0
        t.data = a


def test_eval_net_matches_one_hot_supernet():
    rng = np.random.default_rng(8)
    nodes = 4
    sup = SuperNet(SMALL, CellSpec(nodes=nodes), seed=2)
    _one_hot_arch(sup, rng)
    g = sup.genotype(k=nodes - 1)  # keep every edge
    ev = EvalNet(g, SMALL, seed=99)
    ev.set_weights({k: sup.params[k].data for k in ev.params})
    x = rng.normal(size=(2, 1, 8, 8))
    np.testing.assert_allclose(ev.forward(None, x).data, sup.forward(None, x).data, atol=1e-10)


def test_eval_net_rejects_node_mismatch():
    g = Genotype(normal=(("identity", 0, 2), ("identity", 1, 2)), reduce=(("identity", 0, 2), ("identity", 1, 2)), nodes=3)
    with pytest.raises(ValueError, match="nodes"):
        EvalNet(g, SMALL, cell=CellSpec(nodes=5))


def _simple_genotype():
    return Genotype(
        normal=(("identity", 0, 2), ("identity", 1, 2)),
        reduce=(("max_pool_3x3", 0, 2), ("avg_pool_3x3", 1, 2)),
        nodes=3,
    )


def test_path_dropout_zero_is_deterministic():
    x = np.random.default_rng(0).normal(size=(4, 1, 8, 8))
    net = EvalNet(_simple_genotype(), SMALL, seed=0)
    a = net.forward(None, x, training=True, rng=np.random.default_rng(1)).data
    b = net.forward(None, x, training=True, rng=np.random.default_rng(2)).data
    np.testing.assert_array_equal(a, b)


def test_path_dropout_needs_rng():
    spec = NetworkSpec(cell_count=3, channels=4, num_classes=3, path_dropout=0.2)
    net = EvalNet(_simple_genotype(), spec, seed=0)
    with pytest.raises(ValueError, match="rng"):
        net.forward(None, np.zeros((1, 1, 8, 8)), training=True)


def test_path_dropout_near_one_kills_paths():
    spec = NetworkSpec(cell_count=3, channels=4, num_classes=3, path_dropout=0.999)
    net = EvalNet(_simple_genotype(), spec, seed=0)
    x = Tensor(np.random.default_rng(0).normal(size=(8, 4, 8, 8)))
    rng = np.random.default_rng(0)
    h = net._drop(None, x, rng)
    assert np.count_nonzero(np.abs(h.data).sum(axis=(1, 2, 3))) <= 1


def test_path_dropout_preserves_expectation():
    spec = NetworkSpec(cell_count=3, channels=4, num_classes=3, path_dropout=0.3)
    net = EvalNet(_simple_genotype(), spec, seed=0)
    x = Tensor(np.ones((20000, 1, 1, 1)))
    h = net._drop(None, x, np.random.default_rng(0)).data
    # Bernoulli(0.7) / 0.7 has std sqrt(0.3/0.7) per sample
    assert abs(h.mean() - 1.0) < 4 * math.sqrt(0.3 / 0.7) / math.sqrt(x.shape[0])
    assert set(np.unique(h)) <= {0.0, 1.0 / 0.7}
