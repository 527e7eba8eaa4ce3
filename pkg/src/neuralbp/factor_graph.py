"""Bipartite factor graphs with arbitrary factor arity.

A graph holds variables (discrete, cardinality >= 2), factors, and one edge
per (factor, variable) incidence.  Edge ids are dense and assigned in input
order: factor by factor, following each factor's scope order.  Degree-one
factors are not kept as nodes; :func:`fold_singleton_factors` turns them into
per-variable prior distributions.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

PROB_FLOOR = 1e-12


class FactorGraphError(ValueError):
    pass


class DuplicateEdge(FactorGraphError):
    pass


class ArityMismatch(FactorGraphError):
    pass


class EmptyFactor(FactorGraphError):
    pass


class SingletonOnMultiEdgeFactor(FactorGraphError):
    pass


class FactorKind(IntEnum):
    PARITY = 0
    TABLE = 1
    PAIRWISE_EXP = 2


@dataclass(frozen=True)
class Factor:
    """One factor: its scope (variable ids, in table-axis order) and payload.

    ``table`` is used by TABLE factors, ``coupling`` by PAIRWISE_EXP factors,
    whose value is ``exp(coupling * s_i * s_j)`` with spin ``s = +1`` for
    state 0 and ``-1`` for state 1.
    """

    kind: FactorKind
    scope: tuple
    table: np.ndarray | None = None
    coupling: float = 0.0

    @staticmethod
    def parity(scope: Sequence[int]) -> "Factor":
        return Factor(FactorKind.PARITY, tuple(int(v) for v in scope))

    @staticmethod
    def from_table(scope: Sequence[int], table) -> "Factor":
        return Factor(FactorKind.TABLE, tuple(int(v) for v in scope),
                      table=np.asarray(table, dtype=np.float64))

    @staticmethod
    def pairwise_exp(i: int, j: int, coupling: float) -> "Factor":
        return Factor(FactorKind.PAIRWISE_EXP, (int(i), int(j)), coupling=float(coupling))


@dataclass(frozen=True)
class Segments:
    """CSR grouping of edge ids by an owning node.

    ``order[ptr[s]:ptr[s+1]]`` lists the edges of node ``s`` sorted by the id
    of the node at the other end, which makes every reduction over a segment
    independent of edge insertion order.  ``padded`` is the same content as a
    dense ``(num_segments, max_degree)`` matrix padded with ``-1``.
    """

    ptr: np.ndarray
    order: np.ndarray
    padded: np.ndarray
    owner: np.ndarray  # owner[e] = segment id of edge e

    @property
    def num_segments(self) -> int:
        return len(self.ptr) - 1

    @property
    def degree(self) -> np.ndarray:
        return np.diff(self.ptr)


def _build_segments(owner: np.ndarray, other: np.ndarray, count: int) -> Segments:
    owner = np.asarray(owner, dtype=np.int64)
    if len(owner):
        order = np.lexsort((other, owner)).astype(np.int64)
    else:
        order = np.zeros(0, dtype=np.int64)
    deg = np.bincount(owner, minlength=count) if len(owner) else np.zeros(count, dtype=np.int64)
    ptr = np.zeros(count + 1, dtype=np.int64)
    np.cumsum(deg, out=ptr[1:])
    width = int(deg.max()) if count and len(owner) else 0
    padded = np.full((count, width), -1, dtype=np.int64)
    if len(order):
        slot = np.arange(len(order)) - ptr[owner[order]]
        padded[owner[order], slot] = order
    for arr in (order, ptr, padded, owner):
        arr.setflags(write=False)
    return Segments(ptr=ptr, order=order, padded=padded, owner=owner)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _as_rows(a, n) -> np.ndarray:
    """``a`` as an ``(n, width)`` array; tolerates ``n == 0``."""
    a = np.asarray(a, dtype=np.float64)
    if n == 0:
        return np.zeros((0, a.shape[-1] if a.ndim >= 2 else 0))
    return a.reshape(n, -1)


class FactorGraph:
    """Immutable bipartite factor graph.

    Attributes
    ----------
    cardinality : (V,) int array
    factors : tuple of :class:`Factor`
    edge_factor, edge_var : (E,) int arrays
    priors : (V, K) array of normalized prior distributions (uniform rows
        where ``has_prior`` is False); ``K`` is the largest cardinality.
    node_attributes : (V, Av) array, factor_attributes : (F, Af) array
    edge_attr_x2f, edge_attr_f2x : (E, Ae) arrays, one channel per direction
    """

    def __init__(self, cardinality, factors, priors=None, has_prior=None,
                 node_attributes=None, factor_attributes=None,
                 edge_attr_x2f=None, edge_attr_f2x=None):
        card = np.asarray(cardinality, dtype=np.int64).reshape(-1)
        if np.any(card < 2):
            raise ArityMismatch("variable cardinality must be >= 2")
        V = len(card)
        K = int(card.max()) if V else 2
        factors = tuple(factors)
        F = len(factors)

        edge_factor, edge_var = [], []
        for fi, fac in enumerate(factors):
            if len(fac.scope) == 0:
                raise EmptyFactor(f"factor {fi} has no variables")
            if len(set(fac.scope)) != len(fac.scope):
                raise DuplicateEdge(f"factor {fi} lists a variable twice: {fac.scope}")
            for v in fac.scope:
                if not 0 <= v < V:
                    raise FactorGraphError(f"factor {fi} references variable {v} out of range")
            dims = tuple(int(card[v]) for v in fac.scope)
            if fac.kind == FactorKind.TABLE:
                if fac.table is None or fac.table.shape != dims:
                    shape = None if fac.table is None else fac.table.shape
                    raise ArityMismatch(f"factor {fi}: table shape {shape} != {dims}")
                if np.any(fac.table < 0) or not np.all(np.isfinite(fac.table)):
                    raise ArityMismatch(f"factor {fi}: table values must be finite and >= 0")
            elif fac.kind == FactorKind.PARITY:
                if any(d != 2 for d in dims):
                    raise ArityMismatch(f"parity factor {fi} needs binary variables")
            elif fac.kind == FactorKind.PAIRWISE_EXP:
                if len(dims) != 2 or any(d != 2 for d in dims):
                    raise ArityMismatch(f"pairwise factor {fi} needs two binary variables")
            edge_factor.extend([fi] * len(fac.scope))
            edge_var.extend(fac.scope)

        self.cardinality = card
        self.cardinality.setflags(write=False)
        self.num_variables = V
        self.num_factors = F
        self.max_cardinality = K
        self.factors = factors
        self.edge_factor = np.asarray(edge_factor, dtype=np.int64)
        self.edge_var = np.asarray(edge_var, dtype=np.int64)
        self.edge_factor.setflags(write=False)
        self.edge_var.setflags(write=False)
        self.num_edges = len(edge_var)

        # position of each edge inside its factor's scope (table axis)
        pos = np.zeros(self.num_edges, dtype=np.int64)
        start = 0
        for fac in factors:
            pos[start:start + len(fac.scope)] = np.arange(len(fac.scope))
            start += len(fac.scope)
        self.edge_position = pos
        self.edge_position.setflags(write=False)
        fstart = np.zeros(F + 1, dtype=np.int64)
        if F:
            np.cumsum([len(f.scope) for f in factors], out=fstart[1:])
        self.factor_edge_start = fstart
        self.factor_edge_start.setflags(write=False)

        self.by_variable = _build_segments(self.edge_var, self.edge_factor, V)
        self.by_factor = _build_segments(self.edge_factor, self.edge_var, F)

        mask = np.arange(K)[None, :] < card[:, None]
        mask.setflags(write=False)
        self.state_mask = mask
        self.uniform_cardinality = bool(np.all(card == K))

        kinds = np.array([int(f.kind) for f in factors], dtype=np.int64)
        self.factor_kind = kinds
        self.factor_kind.setflags(write=False)
        self.parity_factors = np.flatnonzero(kinds == FactorKind.PARITY)
        self.pairwise_factors = np.flatnonzero(kinds == FactorKind.PAIRWISE_EXP)
        self.table_factors = np.flatnonzero(kinds == FactorKind.TABLE)
        self.couplings = _frozen([f.coupling for f in factors])
        self._parity_segments = None

        if priors is None:
            p = mask / mask.sum(1, keepdims=True) if V else np.zeros((0, K))
            hp = np.zeros(V, dtype=bool)
        else:
            p = np.array(priors, dtype=np.float64).reshape(V, K)
            hp = np.ones(V, dtype=bool) if has_prior is None else np.asarray(has_prior, bool)
            p = np.where(mask, np.maximum(p, PROB_FLOOR), 0.0)
            p /= p.sum(1, keepdims=True)
            p[~hp] = (mask / mask.sum(1, keepdims=True))[~hp]
        self.priors = _frozen(p)
        self.has_prior = np.array(hp, dtype=bool)
        self.has_prior.setflags(write=False)

        self.node_attributes = _frozen(np.zeros((V, 0)) if node_attributes is None
                                       else _as_rows(node_attributes, V))
        self.factor_attributes = _frozen(np.zeros((F, 0)) if factor_attributes is None
                                         else _as_rows(factor_attributes, F))
        E = self.num_edges
        self.edge_attr_x2f = _frozen(np.zeros((E, 0)) if edge_attr_x2f is None
                                     else _as_rows(edge_attr_x2f, E))
        self.edge_attr_f2x = _frozen(np.zeros((E, 0)) if edge_attr_f2x is None
                                     else _as_rows(edge_attr_f2x, E))

    # -- structure helpers -------------------------------------------------
    def factor_edges(self, f: int) -> np.ndarray:
        """Edge ids of factor ``f`` in scope order."""
        return np.arange(self.factor_edge_start[f], self.factor_edge_start[f + 1])

    def variable_edges(self, v: int) -> np.ndarray:
        s = self.by_variable
        return s.order[s.ptr[v]:s.ptr[v + 1]]

    def degree_factor(self, f: int) -> int:
        return len(self.factors[f].scope)

    def degree_variable(self, v: int) -> int:
        return int(self.by_variable.ptr[v + 1] - self.by_variable.ptr[v])

    @property
    def parity_segments(self) -> Segments:
        """Edges of parity factors only, grouped per factor (lazy)."""
        if self._parity_segments is None:
            keep = np.isin(self.edge_factor, self.parity_factors)
            owner = np.where(keep, self.edge_factor, self.num_factors)
            seg = _build_segments(owner, self.edge_var, self.num_factors + 1)
            # drop the trailing bucket of non-parity edges
            ptr = seg.ptr[:-1].copy()
            order = seg.order[:ptr[-1]].copy()
            padded = seg.padded[:-1].copy()
            for a in (ptr, order, padded):
                a.setflags(write=False)
            self._parity_segments = Segments(ptr=ptr, order=order, padded=padded, owner=seg.owner)
        return self._parity_segments

    def with_priors(self, priors, has_prior=None, node_attributes=None) -> "FactorGraph":
        """Same structure, new priors (and optionally new node attributes).

        The structural arrays are shared with ``self``; nothing is re-validated.
        """
        V, K = self.num_variables, self.max_cardinality
        mask = self.state_mask
        p = np.array(priors, dtype=np.float64).reshape(V, K)
        hp = np.ones(V, dtype=bool) if has_prior is None else np.array(has_prior, dtype=bool)
        p = np.where(mask, np.maximum(p, PROB_FLOOR), 0.0)
        p /= p.sum(1, keepdims=True)
        p[~hp] = (mask / mask.sum(1, keepdims=True))[~hp]
        out = copy.copy(self)
        out.priors = _frozen(p)
        hp.setflags(write=False)
        out.has_prior = hp
        if node_attributes is not None:
            out.node_attributes = _frozen(_as_rows(node_attributes, V))
        return out

    def __repr__(self):
        return (f"FactorGraph(V={self.num_variables}, F={self.num_factors}, "
                f"E={self.num_edges}, K={self.max_cardinality})")


def build_graph(cardinality, factors, node_attributes=None, factor_attributes=None,
                priors=None, edge_attr_x2f=None, edge_attr_f2x=None) -> FactorGraph:
    """Build a graph; ``cardinality`` may be an int count of binary variables."""
    if np.isscalar(cardinality):
        cardinality = [2] * int(cardinality)
    return FactorGraph(cardinality, factors, priors=priors,
                       node_attributes=node_attributes, factor_attributes=factor_attributes,
                       edge_attr_x2f=edge_attr_x2f, edge_attr_f2x=edge_attr_f2x)


def fold_singleton_factors(graph: FactorGraph, factor_ids=None) -> FactorGraph:
    """Move degree-one TABLE factors into variable priors.

    With ``factor_ids=None`` every degree-one factor is folded.  Several
    singletons on one variable multiply into a single prior, which also
    multiplies any prior the variable already had.
    """
    if factor_ids is None:
        factor_ids = [i for i, f in enumerate(graph.factors) if len(f.scope) == 1]
    factor_ids = sorted(set(int(i) for i in factor_ids))
    K = graph.max_cardinality
    priors = np.array(graph.priors)
    has = np.array(graph.has_prior)
    for fi in factor_ids:
        fac = graph.factors[fi]
        if len(fac.scope) != 1:
            raise SingletonOnMultiEdgeFactor(f"factor {fi} has degree {len(fac.scope)}")
        if fac.kind != FactorKind.TABLE:
            raise SingletonOnMultiEdgeFactor(f"factor {fi} is not a table factor")
        v = fac.scope[0]
        row = np.zeros(K)
        row[:len(fac.table)] = fac.table
        priors[v] = priors[v] * row if has[v] else row
        has[v] = True
    if not factor_ids:
        return graph
    dropped = set(factor_ids)
    keep = [i for i in range(graph.num_factors) if i not in dropped]
    keep_edges = np.concatenate([graph.factor_edges(i) for i in keep]) if keep else np.zeros(0, int)
    return FactorGraph(graph.cardinality, [graph.factors[i] for i in keep],
                       priors=priors, has_prior=has,
                       node_attributes=graph.node_attributes,
                       factor_attributes=graph.factor_attributes[keep],
                       edge_attr_x2f=graph.edge_attr_x2f[keep_edges],
                       edge_attr_f2x=graph.edge_attr_f2x[keep_edges])


def unfold_priors(graph: FactorGraph) -> FactorGraph:
    """Inverse of folding: priors become explicit singleton TABLE factors."""
    extra = []
    for v in np.flatnonzero(graph.has_prior):
        k = int(graph.cardinality[v])
        extra.append(Factor.from_table([v], graph.priors[v, :k]))
    Af = graph.factor_attributes.shape[1]
    fattr = np.vstack([graph.factor_attributes, np.zeros((len(extra), Af))])
    Ae = graph.edge_attr_x2f.shape[1]
    pad = np.zeros((len(extra), Ae))
    return FactorGraph(graph.cardinality, list(graph.factors) + extra,
                       node_attributes=graph.node_attributes, factor_attributes=fattr,
                       edge_attr_x2f=np.vstack([graph.edge_attr_x2f, pad]),
                       edge_attr_f2x=np.vstack([graph.edge_attr_f2x, pad]))


def replicate(graph: FactorGraph, copies: int, priors=None, node_attributes=None) -> FactorGraph:
    """Disjoint union of ``copies`` instances of ``graph``.

    Variables of copy ``c`` get ids ``c*V + v``; ``priors`` and
    ``node_attributes`` may be given per copy with shape ``(copies, V, ...)``.
    """
    V = graph.num_variables
    factors = []
    for c in range(copies):
        off = c * V
        for fac in graph.factors:
            factors.append(Factor(fac.kind, tuple(v + off for v in fac.scope),
                                  fac.table, fac.coupling))
    card = np.tile(graph.cardinality, copies)
    if priors is None:
        pri = np.tile(graph.priors, (copies, 1))
        has = np.tile(graph.has_prior, copies)
    else:
        pri = np.asarray(priors).reshape(copies * V, -1)
        has = np.ones(copies * V, dtype=bool)
    if node_attributes is None:
        na = np.tile(graph.node_attributes, (copies, 1))
    else:
        na = np.asarray(node_attributes).reshape(copies * V, -1)
    return FactorGraph(card, factors, priors=pri, has_prior=has, node_attributes=na,
                       factor_attributes=np.tile(graph.factor_attributes, (copies, 1)),
                       edge_attr_x2f=np.tile(graph.edge_attr_x2f, (copies, 1)),
                       edge_attr_f2x=np.tile(graph.edge_attr_f2x, (copies, 1)))
