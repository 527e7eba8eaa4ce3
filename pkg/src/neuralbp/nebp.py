"""Neural enhanced belief propagation and the stand-alone FG-GNN decoder.

Each NEBP iteration runs one BP update on the current factor-to-variable
messages, feeds the BP messages to two FG-GNN rounds, then refines every
factor-to-variable message as ``mu * f_s(M) + f_u(M)``.  Messages coming
from folded singleton factors (the priors) are refined from the variable
embedding ``h_x``; all other messages from the latent edge message
``m_f2x``.  BP outputs enter the tape as constants.

Binary variables only.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diff_engine as de
from . import fg_gnn
from .factor_graph import FactorGraph
from .sum_product import bp_update, marginals_from


class NonFiniteState(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a learned decoder; stored in checkpoint metadata."""

    kind: str = "nebp"            # "nebp" or "fg-gnn"
    hidden: int = 32
    activation: str = "selu"
    iterations: int = 20
    rounds: int = 2
    node_attr: int = 4            # encoded prior (2) + experiment extras
    factor_attr: int = 0
    fu_bias_init: float = -6.0    # softplus(-6) ~ 2.5e-3: start close to BP
    zero_fu: bool = False         # drop the f_u term: exactly BP for any f_s

    @property
    def gnn(self) -> fg_gnn.GnnConfig:
        edge = fg_gnn.MESSAGE_FEATURES if self.kind == "nebp" else 0
        return fg_gnn.GnnConfig(hidden=self.hidden, activation=self.activation,
                                edge_attr=edge, node_attr=self.node_attr,
                                factor_attr=self.factor_attr)

    @classmethod
    def from_meta(cls, meta):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in meta.items() if k in names})


def init_model(cfg: ModelConfig, rng) -> de.ModelParams:
    params = de.ModelParams(meta=asdict(cfg))
    fg_gnn.init_fg_gnn(params, cfg.gnn, rng)
    H = cfg.hidden
    if cfg.kind == "nebp":
        for src in ("node", "edge"):
            de.init_mlp2(params, f"comb.fs_{src}", H, H, 1, rng)
            de.init_mlp2(params, f"comb.fu_{src}", H, H, 2, rng)
            params[f"comb.fu_{src}.1.b"].value[:] = cfg.fu_bias_init
    elif cfg.kind == "fg-gnn":
        de.init_mlp2(params, "readout", H, H, 1, rng)
    else:
        raise ValueError(f"unknown model kind {cfg.kind!r}")
    return params


def model_config(params: de.ModelParams) -> ModelConfig:
    return ModelConfig.from_meta(params.meta)


def combine(mu_tilde, features, params, source, activation="selu", zero_fu=False):
    """Refine messages: ``mu_tilde * f_s(features) + f_u(features)``.

    ``source`` selects the MLP pair: "node" (features = h_x, refines the
    singleton messages) or "edge" (features = m_f2x).  No normalization is
    applied here.  Returns ``(refined, f_u output or None)``.
    """
    fs = de.mlp2(params, f"comb.fs_{source}", features, activation, "softplus")
    scaled = de.mul(mu_tilde, fs)
    if zero_fu:
        return scaled, None
    fu = de.mlp2(params, f"comb.fu_{source}", features, activation, "softplus")
    return de.add(scaled, fu), fu


def _binary_marginal(log_prior, log_f2v, graph):
    """log-domain product of prior and incoming messages -> P(x=1) tensor."""
    L = de.add(log_prior, de.segment_sum(log_f2v, graph.by_variable)) if graph.num_edges else log_prior
    d = de.sub(de.columns(L, 1, 2), de.columns(L, 0, 1))
    return de.sigmoid(d)


def _p1_to_marginals(p1):
    p1 = np.asarray(p1).reshape(-1)
    return np.stack([1.0 - p1, p1], axis=1)


@dataclass
class NebpRun:
    marginals: np.ndarray
    p1: de.Tensor
    fu_outputs: list = field(default_factory=list)
    bp_trace: list = field(default_factory=list)
    records: list = field(default_factory=list)
    underflows: int = 0


def _check_binary(graph):
    if graph.max_cardinality != 2 or not graph.uniform_cardinality:
        raise ValueError("learned decoders need binary variables")


def run_nebp(graph: FactorGraph, params: de.ModelParams, iterations=None, seed=0,
             zero_fu=False, replay=None, keep_records=False) -> NebpRun:
    """Run the hybrid loop for ``iterations`` steps (default: the model config).

    ``seed`` may be an int or a numpy Generator (used for the initial hidden
    states).  ``replay`` is a ``bp_trace`` from an earlier run; its BP
    outputs are used instead of recomputing them, which fixes the BP
    constants while parameters are perturbed (finite-difference checks).
    """
    _check_binary(graph)
    cfg = model_config(params)
    zero_fu = zero_fu or cfg.zero_fu
    N = cfg.iterations if iterations is None else iterations
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    state = fg_gnn.initial_state(graph, cfg.hidden, rng)
    prior = graph.priors
    has = graph.has_prior[:, None]

    f2v = np.full((graph.num_edges, 2), 0.5)
    single = prior
    f2v_ref = None
    prior_ref = de.Tensor(prior)
    run = NebpRun(marginals=None, p1=None)
    for t in range(N):
        if replay is not None:
            v2f, f2v_tilde = replay[t]
        else:
            v2f, f2v_tilde, nbad = bp_update(f2v, graph, priors=single)
            run.underflows += nbad
        run.bp_trace.append((v2f, f2v_tilde))
        attrs = fg_gnn.encode_bp_messages(graph, v2f, f2v_tilde)
        state = fg_gnn.fg_gnn_apply(state, attrs, graph, params, cfg.rounds, cfg.activation)

        f2v_ref, fu_e = combine(f2v_tilde, state.m_f2x, params, "edge", cfg.activation, zero_fu)
        node_ref, fu_n = combine(prior, state.h_x, params, "node", cfg.activation, zero_fu)
        # variables without a folded singleton keep a uniform, unrefined prior
        prior_ref = node_ref if has.all() else de.add(de.mul(node_ref, has.astype(float)),
                                                       0.5 * (~has))
        if not zero_fu:
            if not has.all():
                fu_n = de.gather(fu_n, np.flatnonzero(has[:, 0]))
            run.fu_outputs.append(_mean_fu(fu_e, fu_n))
        if keep_records:
            run.records.append({"mu_tilde": f2v_tilde, "mu": f2v_ref.value.copy(),
                                "prior": prior_ref.value.copy()})
        f2v = f2v_ref.value
        single = prior_ref.value

    if N == 0:
        p1 = de.Tensor(prior[:, 1].copy())
    else:
        log_f2v = de.log(f2v_ref) if graph.num_edges else None
        p1 = de.column(_binary_marginal(de.log(prior_ref), log_f2v, graph), 0)
    if not np.all(np.isfinite(p1.value)):
        raise NonFiniteState("non-finite marginals")
    run.p1 = p1
    run.marginals = _p1_to_marginals(p1.value)
    return run


def _mean_fu(fu_e, fu_n):
    """Mean over all f_u outputs of one iteration (edge and singleton heads)."""
    n_e, n_n = fu_e.value.size, fu_n.value.size
    s = de.add(de.total(fu_e), de.total(fu_n))
    return de.mul(s, 1.0 / max(n_e + n_n, 1))


@dataclass
class FgGnnRun:
    marginals: np.ndarray
    p1: de.Tensor


def run_fg_gnn(graph: FactorGraph, params: de.ModelParams, iterations=None, seed=0) -> FgGnnRun:
    """Stand-alone FG-GNN: ``iterations`` steps, then a readout MLP on ``h_x``."""
    _check_binary(graph)
    cfg = model_config(params)
    N = cfg.iterations if iterations is None else iterations
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    state = fg_gnn.initial_state(graph, cfg.hidden, rng)
    attrs = fg_gnn.encode_bp_messages(graph)
    for _ in range(N):
        state = fg_gnn.fg_gnn_step(state, attrs, graph, params, cfg.activation)
    logit = de.mlp2(params, "readout", state.h_x, cfg.activation)
    p1 = de.column(de.sigmoid(logit), 0)
    if not np.all(np.isfinite(p1.value)):
        raise NonFiniteState("non-finite marginals")
    return FgGnnRun(marginals=_p1_to_marginals(p1.value), p1=p1)


def infer(graph: FactorGraph, params: de.ModelParams, seed=0, iterations=None):
    """Dispatch on the checkpoint's model kind."""
    if model_config(params).kind == "nebp":
        return run_nebp(graph, params, iterations=iterations, seed=seed)
    return run_fg_gnn(graph, params, iterations=iterations, seed=seed)


def bp_marginals(graph: FactorGraph, iterations: int) -> np.ndarray:
    """Plain BP with the same conventions as :func:`run_nebp` (reference path)."""
    f2v = np.full((graph.num_edges, 2), 0.5)
    for _ in range(iterations):
        _, f2v, _ = bp_update(f2v, graph)
    return marginals_from(f2v, graph) if iterations else np.array(graph.priors)


def hard_decisions(marginals) -> np.ndarray:
    """argmax per variable; an exact tie goes to 0."""
    m = np.asarray(marginals)
    return (m[..., 1] > m[..., 0]).astype(np.int64)
