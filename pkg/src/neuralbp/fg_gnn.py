"""Graph neural network on the bipartite factor graph (FG-GNN).

One step, with ``[a, b]`` denoting concatenation::

    m_x2f[e] = phi_x2f([h_f, h_x, a_x2f[e]])     for e = (f, x)
    m_f2x[e] = phi_f2x([h_x, h_f, a_f2x[e]])
    m_f = sum of m_x2f over the edges of f,  m_x = sum of m_f2x over the edges of x
    h_f' = GRU(h_f, mlp([m_f, a_f]))
    h_x' = GRU(h_x, mlp([m_x, a_v]))

Edge functions are two-layer MLPs with a linear output; node updates are a
two-layer MLP feeding a GRU cell.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diff_engine as de
from .factor_graph import PROB_FLOOR, FactorGraph

LOGIT_CLIP = 15.0
MESSAGE_FEATURES = 2


@dataclass
class AttributeSet:
    x2f: np.ndarray     # (E, Ae)
    f2x: np.ndarray     # (E, Ae)
    node: np.ndarray    # (V, Av)
    factor: np.ndarray  # (F, Af)


@dataclass
class GnnState:
    h_x: de.Tensor
    h_f: de.Tensor
    m_f2x: de.Tensor | None = None


@dataclass(frozen=True)
class GnnConfig:
    hidden: int = 32
    activation: str = "selu"
    edge_attr: int = MESSAGE_FEATURES
    node_attr: int = 2
    factor_attr: int = 0


def message_features(p1) -> np.ndarray:
    """``[p(1), logit p(1)]`` per row, logit clipped to +-15."""
    p1 = np.asarray(p1, dtype=np.float64)
    p1c = np.clip(p1, PROB_FLOOR, 1.0)
    p0c = np.clip(1.0 - p1, PROB_FLOOR, 1.0)
    logit = np.clip(np.log(p1c) - np.log(p0c), -LOGIT_CLIP, LOGIT_CLIP)
    return np.stack([p1, logit], axis=-1)


def encode_bp_messages(graph: FactorGraph, v2f=None, f2v=None) -> AttributeSet:
    """Build FG-GNN attributes from BP messages and the graph's static attributes.

    Edge attributes are the encoded messages (omitted when ``v2f``/``f2v``
    are None, as for the stand-alone FG-GNN) followed by any static edge
    attributes.  ``a_v`` is the encoded prior followed by the graph's node
    attributes; ``a_f`` is the graph's factor attributes.
    """
    E = graph.num_edges
    x2f = [graph.edge_attr_x2f]
    f2x = [graph.edge_attr_f2x]
    if v2f is not None:
        x2f.insert(0, message_features(v2f[:, 1]))
    if f2v is not None:
        f2x.insert(0, message_features(f2v[:, 1]))
    node = np.hstack([message_features(graph.priors[:, 1]), graph.node_attributes])
    return AttributeSet(x2f=np.hstack(x2f).reshape(E, -1),
                        f2x=np.hstack(f2x).reshape(E, -1),
                        node=node, factor=np.array(graph.factor_attributes))


def init_fg_gnn(params: de.ModelParams, cfg: GnnConfig, rng, prefix="gnn"):
    H = cfg.hidden
    de.init_mlp2(params, f"{prefix}.x2f", 2 * H + cfg.edge_attr, H, H, rng)
    de.init_mlp2(params, f"{prefix}.f2x", 2 * H + cfg.edge_attr, H, H, rng)
    de.init_mlp2(params, f"{prefix}.vf.mlp", H + cfg.factor_attr, H, H, rng)
    de.init_gru(params, f"{prefix}.vf.gru", H, H, rng)
    de.init_mlp2(params, f"{prefix}.vx.mlp", H + cfg.node_attr, H, H, rng)
    de.init_gru(params, f"{prefix}.vx.gru", H, H, rng)


def initial_state(graph: FactorGraph, hidden: int, rng) -> GnnState:
    """Hidden states drawn from a standard normal."""
    h_x = rng.standard_normal((graph.num_variables, hidden))
    h_f = rng.standard_normal((graph.num_factors, hidden))
    return GnnState(h_x=de.Tensor(h_x), h_f=de.Tensor(h_f))


def fg_gnn_step(state: GnnState, attrs: AttributeSet, graph: FactorGraph,
                params: de.ModelParams, activation="selu", prefix="gnn") -> GnnState:
    H = params[f"{prefix}.x2f.1.W"].shape[1]
    for name, a, n in (("x2f", attrs.x2f, graph.num_edges), ("f2x", attrs.f2x, graph.num_edges),
                       ("node", attrs.node, graph.num_variables),
                       ("factor", attrs.factor, graph.num_factors)):
        if a.shape[0] != n:
            raise de.ShapeMismatch(f"{name} attributes have {a.shape[0]} rows, expected {n}")
    if state.h_x.shape[-1] != H or state.h_f.shape[-1] != H:
        raise de.ShapeMismatch("hidden width does not match parameters")

    hx_e = de.expand(state.h_x, graph.by_variable)
    hf_e = de.expand(state.h_f, graph.by_factor)
    m_x2f = de.mlp2(params, f"{prefix}.x2f", de.concat([hf_e, hx_e, attrs.x2f]), activation)
    m_f2x = de.mlp2(params, f"{prefix}.f2x", de.concat([hx_e, hf_e, attrs.f2x]), activation)
    m_f = de.segment_sum(m_x2f, graph.by_factor)
    m_x = de.segment_sum(m_f2x, graph.by_variable)
    in_f = de.mlp2(params, f"{prefix}.vf.mlp", de.concat([m_f, attrs.factor]), activation)
    in_x = de.mlp2(params, f"{prefix}.vx.mlp", de.concat([m_x, attrs.node]), activation)
    h_f = de.gru_cell(params, f"{prefix}.vf.gru", state.h_f, in_f)
    h_x = de.gru_cell(params, f"{prefix}.vx.gru", state.h_x, in_x)
    return GnnState(h_x=h_x, h_f=h_f, m_f2x=m_f2x)


def fg_gnn_apply(state: GnnState, attrs: AttributeSet, graph: FactorGraph,
                 params: de.ModelParams, rounds=2, activation="selu", prefix="gnn") -> GnnState:
    """``rounds`` steps with shared weights and fixed attributes."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    for _ in range(rounds):
        state = fg_gnn_step(state, attrs, graph, params, activation, prefix)
    return state
