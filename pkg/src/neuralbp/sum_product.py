"""Sum-product belief propagation with a synchronous (flooding) schedule.

Messages live in the probability domain as ``(E, K)`` arrays indexed by edge
id, one array per direction.  Every update clamps entries to ``1e-12`` and
renormalizes.  Parity-check factors use the product rule on ``1 - 2 p(1)``;
pairwise exponential factors and dense tables are marginalized exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .factor_graph import PROB_FLOOR, FactorGraph

LDPC_ITERATIONS = 20
ISING_ITERATIONS = 10


@dataclass
class BeliefState:
    v2f: np.ndarray
    f2v: np.ndarray
    iteration: int = 0
    underflows: int = 0


def _cached(graph: FactorGraph, key, build):
    cache = graph.__dict__.setdefault("_sp_cache", {})
    if key not in cache:
        cache[key] = build()
    return cache[key]


def edge_mask(graph: FactorGraph):
    """(E, K) valid-state mask per edge, or None when all variables share K."""
    if graph.uniform_cardinality:
        return None
    return _cached(graph, "edge_mask", lambda: graph.state_mask[graph.edge_var])


def normalize(a, mask=None):
    """Normalize rows, clamp to the probability floor, renormalize.

    Rows whose sum is zero or non-finite become uniform.  Returns the new
    array and the number of such rows.
    """
    a = np.asarray(a, dtype=np.float64)
    if mask is not None:
        a = np.where(mask, a, 0.0)
    s = a.sum(axis=-1, keepdims=True)
    bad = ~(np.isfinite(s) & (s > 0))
    nbad = int(bad.sum())
    if nbad:
        uni = np.ones_like(a) if mask is None else mask.astype(np.float64)
        a = np.where(bad, uni, a)
        s = a.sum(axis=-1, keepdims=True)
    a = np.maximum(a / s, PROB_FLOOR)
    if mask is not None:
        a = np.where(mask, a, 0.0)
    return a / a.sum(axis=-1, keepdims=True), nbad


def uniform_messages(graph: FactorGraph) -> np.ndarray:
    mask = graph.state_mask[graph.edge_var]
    return mask / mask.sum(axis=1, keepdims=True)


def init_messages(graph: FactorGraph) -> BeliefState:
    u = uniform_messages(graph)
    return BeliefState(v2f=u.copy(), f2v=u.copy())


def variable_to_factor(state: BeliefState, graph: FactorGraph, priors=None) -> np.ndarray:
    """Leave-one-out product of incoming factor messages times the prior."""
    return _variable_to_factor(state.f2v, graph, priors)[0]


def _variable_to_factor(f2v, graph, priors=None):
    if graph.num_edges == 0:
        return np.zeros((0, graph.max_cardinality)), 0
    pri = graph.priors if priors is None else priors
    raw = kernels.loo_product(f2v, graph.by_variable, init=pri)
    return normalize(raw, edge_mask(graph))


def parity_check_message(incoming) -> np.ndarray:
    """Message from a parity check to one neighbour, given the other neighbours' messages.

    ``incoming`` is a sequence of binary distributions ``(p0, p1)``.
    """
    inc = np.asarray(incoming, dtype=np.float64).reshape(-1, 2)
    prod = 1.0
    for p0, p1 in inc:
        prod *= (p0 - p1) / (p0 + p1)
    return np.array([0.5 * (1.0 + prod), 0.5 * (1.0 - prod)])


def _parity_edges(graph):
    def build():
        return np.flatnonzero(np.isin(graph.edge_factor, graph.parity_factors))
    return _cached(graph, "parity_edges", build)


def _pairwise_edges(graph):
    def build():
        ea = graph.factor_edge_start[graph.pairwise_factors]
        return ea, ea + 1, graph.couplings[graph.pairwise_factors]
    return _cached(graph, "pairwise_edges", build)


def factor_to_variable(state: BeliefState, graph: FactorGraph) -> np.ndarray:
    """Marginalize each factor times its other incoming messages."""
    return _factor_to_variable(state.v2f, graph)[0]


def _factor_to_variable(v2f, graph):
    E, K = graph.num_edges, graph.max_cardinality
    out = np.zeros((E, K))
    if E == 0:
        return out, 0

    if len(graph.parity_factors):
        pe = _parity_edges(graph)
        p1 = np.zeros(E)
        kernels.parity_loo(v2f[:, 1], graph.parity_segments, p1)
        # v2f is normalized, so v2f[:, 1] is P(x=1) for binary edges
        out[pe, 0] = 1.0 - p1[pe]
        out[pe, 1] = p1[pe]

    if len(graph.pairwise_factors):
        ea, eb, J = _pairwise_edges(graph)
        same = np.exp(J - np.abs(J))
        diff = np.exp(-J - np.abs(J))
        va, vb = v2f[ea], v2f[eb]
        out[eb, 0] = same * va[:, 0] + diff * va[:, 1]
        out[eb, 1] = diff * va[:, 0] + same * va[:, 1]
        out[ea, 0] = same * vb[:, 0] + diff * vb[:, 1]
        out[ea, 1] = diff * vb[:, 0] + same * vb[:, 1]

    for f in graph.table_factors:
        fac = graph.factors[f]
        edges = graph.factor_edges(f)
        d = len(edges)
        msgs = [v2f[e, :graph.cardinality[v]] for e, v in zip(edges, fac.scope)]
        for j, e in enumerate(edges):
            operands = [fac.table, list(range(d))]
            for k in range(d):
                if k != j:
                    operands += [msgs[k], [k]]
            res = np.einsum(*operands, [j])
            out[e, :len(res)] = res

    return normalize(out, edge_mask(graph))


def bp_update(f2v, graph: FactorGraph, priors=None):
    """One BP update: normalize incoming factor messages, then run the
    variable-to-factor and factor-to-variable products.

    Returns ``(v2f, f2v_new, underflows)``.
    """
    f2v, n0 = normalize(f2v, edge_mask(graph))
    v2f, n1 = _variable_to_factor(f2v, graph, priors)
    new, n2 = _factor_to_variable(v2f, graph)
    return v2f, new, n0 + n1 + n2


def bp_step(state: BeliefState, graph: FactorGraph, damping=None) -> BeliefState:
    """One flooding round; ``damping`` alpha mixes ``(1-alpha)*old + alpha*new``."""
    v2f, new, nbad = bp_update(state.f2v, graph)
    if damping is not None and damping != 1.0:
        if not 0.0 < damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        new, n = normalize((1.0 - damping) * state.f2v + damping * new, edge_mask(graph))
        nbad += n
    return BeliefState(v2f=v2f, f2v=new, iteration=state.iteration + 1,
                       underflows=state.underflows + nbad)


def marginals(state: BeliefState, graph: FactorGraph, priors=None) -> np.ndarray:
    """Per-variable product of the prior and all incoming factor messages."""
    return marginals_from(state.f2v, graph, priors)


def marginals_from(f2v, graph: FactorGraph, priors=None) -> np.ndarray:
    pri = graph.priors if priors is None else priors
    if graph.num_variables == 0:
        return np.zeros((0, graph.max_cardinality))
    if graph.num_edges == 0:
        raw = np.array(pri, dtype=np.float64)
    else:
        raw = kernels.segment_product(f2v, graph.by_variable, pri)
    mask = None if graph.uniform_cardinality else graph.state_mask
    return normalize(raw, mask)[0]


def run_bp(graph: FactorGraph, iterations: int, damping=None, state=None):
    """Run ``iterations`` flooding rounds from uniform messages; returns (state, marginals)."""
    st = init_messages(graph) if state is None else replace(state)
    for _ in range(iterations):
        st = bp_step(st, graph, damping)
    return st, marginals(st, graph)
