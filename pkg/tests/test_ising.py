import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuralbp import ising
from neuralbp.factor_graph import FactorKind
from neuralbp.sum_product import run_bp

from conftest import enumerate_marginals

P_PLUS = np.exp(0.25) / (np.exp(0.25) + np.exp(-0.25))


def model(b, edges=(), J=(), mismatch=None, side=None):
    b = np.asarray(b, dtype=float)
    side = side or int(round(np.sqrt(len(b))))
    return ising.IsingModel(side=side, b=b, edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2),
                            J=np.asarray(J, dtype=float), mismatch=mismatch)


def test_lattice_sizes(rng):
    one = ising.sample_ising(rng, side=1)
    assert one.num_spins == 1 and len(one.edges) == 0
    four = ising.sample_ising(rng, side=4)
    assert four.num_spins == 16 and len(four.edges) == 24
    assert {tuple(e) for e in four.edges[:3]} == {(0, 1), (0, 4), (1, 2)}


def test_size_guard(rng):
    with pytest.raises(ising.TooLargeForExactOracle):
        ising.sample_ising(rng, side=5)
    with pytest.raises(ValueError):
        ising.sample_ising(rng, side=0)


def test_sampling_deterministic():
    a = ising.sample_ising(np.random.default_rng(3))
    b = ising.sample_ising(np.random.default_rng(3))
    assert np.array_equal(a.b, b.b) and np.array_equal(a.J, b.J)


def test_mismatch(rng):
    m = ising.sample_ising(rng)
    assert ising.add_mismatch(m, 0.0, rng) is m
    mm = ising.add_mismatch(m, 0.8, rng)
    iu = np.triu_indices(16, k=1)
    assert np.count_nonzero(mm.mismatch[iu]) == 120
    assert np.all((mm.mismatch[iu] >= 0) & (mm.mismatch[iu] <= 0.8))
    assert not np.any(np.tril(mm.mismatch))
    g = ising.ising_to_factor_graph(mm)
    assert g.num_factors == 24
    assert all(f.kind == FactorKind.PAIRWISE_EXP for f in g.factors)
    with pytest.raises(ValueError):
        ising.add_mismatch(m, -0.1, rng)


def test_single_spin_prior_and_exact():
    m = model([0.25], side=1)
    g = ising.ising_to_factor_graph(m)
    assert g.priors[0, 0] == pytest.approx(0.6225, abs=1e-4)
    ex = ising.exact_marginals(m)
    assert ex.marginals[0, 0] == pytest.approx(P_PLUS, abs=1e-12)
    assert ex.log_z == pytest.approx(np.log(2 * np.cosh(0.25)), abs=1e-12)


def test_product_model():
    ex = ising.exact_marginals(model([0.25, 0.0], side=2))
    np.testing.assert_allclose(ex.marginals, [[P_PLUS, 1 - P_PLUS], [0.5, 0.5]], atol=1e-12)


def test_zero_bias_symmetry(rng):
    m = ising.add_mismatch(ising.sample_ising(rng), 0.8, rng)
    m = ising.IsingModel(side=4, b=np.zeros(16), edges=m.edges, J=m.J, mismatch=m.mismatch)
    np.testing.assert_allclose(ising.exact_marginals(m).marginals, 0.5, atol=1e-12)


def test_zero_fields_give_uniform_bp():
    m = model(np.zeros(4), edges=[(0, 1), (1, 3), (2, 3), (0, 2)], J=np.zeros(4))
    _, marg = run_bp(ising.ising_to_factor_graph(m), 5)
    np.testing.assert_allclose(marg, 0.5)


def test_two_spin_symmetry():
    ex = ising.exact_marginals(model([0, 0], edges=[(0, 1)], J=[0.7], side=2))
    np.testing.assert_allclose(ex.marginals, 0.5, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_exact_matches_graph_enumeration(seed):
    # without mismatch the inference graph describes the full model
    r = np.random.default_rng(seed)
    m = ising.sample_ising(r, side=3)
    ex = ising.exact_marginals(m)
    np.testing.assert_allclose(ex.marginals, enumerate_marginals(ising.ising_to_factor_graph(m)),
                               atol=1e-12)
    np.testing.assert_allclose(ex.marginals.sum(1), 1.0, atol=1e-14)


def test_tree_subgraph_matches_bp(rng):
    # spanning comb of the 4x4 lattice: first row plus every column
    edges = [(c, c + 1) for c in range(3)] + [(r * 4 + c, (r + 1) * 4 + c)
                                             for r in range(3) for c in range(4)]
    m = model(rng.normal(0, 0.25, 16), edges=edges, J=rng.normal(size=len(edges)))
    _, marg = run_bp(ising.ising_to_factor_graph(m), 20)
    np.testing.assert_allclose(marg, ising.exact_marginals(m).marginals, atol=1e-10)


def test_enumeration_speed(rng):
    m = ising.add_mismatch(ising.sample_ising(rng), 0.8, rng)
    t0 = time.perf_counter()
    ising.exact_marginals(m)
    assert time.perf_counter() - t0 < 5.0


@pytest.mark.parametrize("p, q, kl", [
    ([[0.5, 0.5]], [[0.5, 0.5]], 0.0),
    ([[0.5, 0.5]], [[0.6225, 0.3775]], 0.030955),
    # the same pair with arguments swapped
    ([[0.6225, 0.3775]], [[0.5, 0.5]], 0.030318),
])
def test_kl_examples(p, q, kl):
    assert ising.kl_marginals(p, q) == pytest.approx(kl, abs=1e-5)


def test_kl_clamped_is_finite():
    v = ising.kl_marginals([[0.5, 0.5]], [[1.0, 0.0]])
    assert np.isfinite(v) and v > 10
    with pytest.raises(ValueError):
        ising.kl_marginals([[0.5, 0.5]], [[0.5, 0.5], [0.5, 0.5]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=6),
       st.lists(st.floats(0.01, 0.99), min_size=6, max_size=6))
def test_kl_nonnegative(p1, q1):
    p = np.stack([1 - np.array(p1), np.array(p1)], 1)
    q = np.stack([1 - np.array(q1[:len(p1)]), np.array(q1[:len(p1)])], 1)
    assert ising.kl_marginals(p, q) >= 0
    assert ising.kl_marginals(p, p) == pytest.approx(0.0, abs=1e-15)


def test_instances_and_damping():
    inst = ising.make_instances(3, seed=0, u=0.4, stream=9)
    again = ising.make_instances(3, seed=0, u=0.4, stream=9)
    assert np.array_equal(inst[2].exact.marginals, again[2].exact.marginals)
    kl = ising.bp_kl(inst)
    assert kl.shape == (3,) and np.all(kl >= 0)
    alpha, scores = ising.select_damping(inst, grid=(0.1, 0.5))
    assert alpha in (0.1, 0.5) and min(scores) == scores[(0.1, 0.5).index(alpha)]
