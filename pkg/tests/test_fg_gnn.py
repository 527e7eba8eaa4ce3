import json
import pathlib
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuralbp import diff_engine as de, fg_gnn
from neuralbp.factor_graph import Factor, FactorGraph, build_graph

GOLDEN = pathlib.Path(__file__).parent / "golden"


def setup(graph, rng, hidden=5, node_attr=2, edge_attr=2):
    cfg = fg_gnn.GnnConfig(hidden=hidden, node_attr=node_attr, edge_attr=edge_attr)
    params = de.ModelParams()
    fg_gnn.init_fg_gnn(params, cfg, rng)
    return params


def bp_attrs(graph, rng):
    v2f = rng.dirichlet([1, 1], size=graph.num_edges)
    f2v = rng.dirichlet([1, 1], size=graph.num_edges)
    return fg_gnn.encode_bp_messages(graph, v2f, f2v)


@pytest.mark.parametrize("p1, expected", [
    (0.5, [0.5, 0.0]),
    (1 - 1e-16, [1 - 1e-16, 15.0]),
    (0.0, [0.0, -15.0]),
    (0.1, [0.1, np.log(1 / 9)]),
])
def test_message_features(p1, expected):
    np.testing.assert_allclose(fg_gnn.message_features(np.array([p1]))[0], expected, rtol=1e-12)


def test_ldpc_node_attributes():
    g = FactorGraph([2, 2], [Factor.parity([0, 1])], priors=[[0.9, 0.1], [0.5, 0.5]],
                    node_attributes=[[-0.8, 3.0], [0.2, 3.0]])
    a = fg_gnn.encode_bp_messages(g)
    np.testing.assert_allclose(a.node[0], [0.1, -2.1972245773362196, -0.8, 3.0], rtol=1e-12)
    assert a.x2f.shape == (2, 0)


def test_zero_edge_mlps_give_zero_messages(rng):
    g = build_graph(3, [Factor.parity([0, 1, 2])])
    p = setup(g, rng)
    for k in p.names():
        if k.startswith("gnn.x2f") or k.startswith("gnn.f2x"):
            p[k].value[...] = 0
    st_ = fg_gnn.initial_state(g, 5, rng)
    out = fg_gnn.fg_gnn_step(st_, bp_attrs(g, rng), g, p)
    assert np.all(out.m_f2x.value == 0)


def test_isolated_variable_still_updates(rng):
    g = build_graph(3, [Factor.parity([0, 1])])
    p = setup(g, rng)
    st_ = fg_gnn.initial_state(g, 5, rng)
    out = fg_gnn.fg_gnn_step(st_, bp_attrs(g, rng), g, p)
    assert not np.allclose(out.h_x.value[2], st_.h_x.value[2])
    assert np.all(np.isfinite(out.h_x.value))


def test_rounds_one_equals_step(rng):
    g = build_graph(3, [Factor.parity([0, 1, 2])])
    p = setup(g, rng)
    st_ = fg_gnn.initial_state(g, 5, rng)
    a = bp_attrs(g, rng)
    one = fg_gnn.fg_gnn_apply(st_, a, g, p, rounds=1)
    step = fg_gnn.fg_gnn_step(st_, a, g, p)
    assert np.array_equal(one.h_x.value, step.h_x.value)
    with pytest.raises(ValueError):
        fg_gnn.fg_gnn_apply(st_, a, g, p, rounds=0)


def test_shape_mismatch(rng):
    g = build_graph(3, [Factor.parity([0, 1, 2])])
    p = setup(g, rng)
    st_ = fg_gnn.initial_state(g, 5, rng)
    a = bp_attrs(g, rng)
    a.node = a.node[:2]
    with pytest.raises(de.ShapeMismatch):
        fg_gnn.fg_gnn_step(st_, a, g, p)
    with pytest.raises(de.ShapeMismatch):
        fg_gnn.fg_gnn_step(fg_gnn.initial_state(g, 4, rng), bp_attrs(g, rng), g, p)


def test_relabeling_equivariance(rng):
    scopes = [[0, 1, 2], [1, 3], [2, 3, 0]]
    g = build_graph(4, [Factor.parity(s) for s in scopes])
    perm = np.array([2, 0, 3, 1])            # old id -> new id
    g2 = build_graph(4, [Factor.parity([perm[v] for v in s]) for s in scopes])
    p = setup(g, rng)
    st_ = fg_gnn.initial_state(g, 5, rng)
    a = bp_attrs(g, rng)
    hx2 = np.zeros_like(st_.h_x.value)
    hx2[perm] = st_.h_x.value
    st2 = fg_gnn.GnnState(h_x=de.Tensor(hx2), h_f=st_.h_f)
    node2 = np.zeros_like(a.node)
    node2[perm] = a.node
    a2 = fg_gnn.AttributeSet(x2f=a.x2f, f2x=a.f2x, node=node2, factor=a.factor)
    out = fg_gnn.fg_gnn_apply(st_, a, g, p)
    out2 = fg_gnn.fg_gnn_apply(st2, a2, g2, p)
    np.testing.assert_allclose(out2.h_x.value[perm], out.h_x.value, atol=1e-13)
    np.testing.assert_allclose(out2.m_f2x.value, out.m_f2x.value, atol=1e-13)


def test_edge_order_does_not_change_output(rng):
    # same factors listed in another order: per-variable sums are taken in
    # canonical order, so variable states agree exactly
    a_scopes = [[0, 1], [1, 2], [0, 2]]
    g1 = build_graph(3, [Factor.parity(s) for s in a_scopes])
    g2 = build_graph(3, [Factor.parity(s) for s in a_scopes[::-1]])
    p = setup(g1, rng, edge_attr=0)
    st_ = fg_gnn.initial_state(g1, 5, rng)
    hf2 = de.Tensor(st_.h_f.value[::-1].copy())
    o1 = fg_gnn.fg_gnn_step(st_, fg_gnn.encode_bp_messages(g1), g1, p)
    o2 = fg_gnn.fg_gnn_step(fg_gnn.GnnState(st_.h_x, hf2), fg_gnn.encode_bp_messages(g2), g2, p)
    assert np.array_equal(o1.h_x.value, o2.h_x.value)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_outputs_finite_for_any_messages(seed):
    r = np.random.default_rng(seed)
    g = build_graph(5, [Factor.parity([0, 1, 2]), Factor.parity([2, 3, 4])])
    p = setup(g, r)
    v2f = r.choice([0.0, 1.0, 0.5, 1e-300], size=(g.num_edges, 1))
    msgs = np.hstack([1 - v2f, v2f])
    a = fg_gnn.encode_bp_messages(g, msgs, msgs[::-1])
    out = fg_gnn.fg_gnn_apply(fg_gnn.initial_state(g, 5, r), a, g, p)
    assert np.all(np.isfinite(out.h_x.value)) and np.all(np.isfinite(out.m_f2x.value))


def test_gradient_check_small_graph(rng):
    g = build_graph(4, [Factor.parity([0, 1, 2]), Factor.parity([1, 3])])
    p = setup(g, rng, hidden=4)
    st_ = fg_gnn.initial_state(g, 4, rng)
    a = bp_attrs(g, rng)
    w = rng.normal(size=4)

    def f(q):
        out = fg_gnn.fg_gnn_apply(st_, a, g, q)
        return de.total(de.matmul(out.h_x, w))
    err, _ = de.gradient_check(f, p, n_coords=80, h=1e-6, rng=rng)
    assert err < 1e-5


def test_golden_regression():
    sys.path.insert(0, str(GOLDEN))
    from make_fg_gnn_golden import toy_output
    ref = json.loads((GOLDEN / "fg_gnn_toy.json").read_text())
    h, m = toy_output()
    np.testing.assert_allclose(h, ref["h_x"], rtol=0, atol=1e-12)
    np.testing.assert_allclose(m, ref["m_f2x"], rtol=0, atol=1e-12)
