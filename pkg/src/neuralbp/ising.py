"""Square-lattice Ising models, exact marginals by enumeration, and KL scoring.

Spins take values +1 (state 0) and -1 (state 1).  The unnormalized weight of
a configuration is ``exp(b.s + sum_{lattice} J_ij s_i s_j + sum_{i<j} u_ij s_i s_j)``
where the ``u`` terms exist only in the data-generating model.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .factor_graph import PROB_FLOOR, Factor, FactorGraph
from .sum_product import ISING_ITERATIONS, run_bp

MAX_EXACT_SPINS = 20
BIAS_STD = 0.25
DAMPING_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))
# enumeration block: 2**14 configurations at a time
_CHUNK_BITS = 14


class TooLargeForExactOracle(ValueError):
    pass


@dataclass(frozen=True)
class IsingModel:
    side: int
    b: np.ndarray              # (n,)
    edges: np.ndarray          # (m, 2) lattice pairs, i < j
    J: np.ndarray              # (m,)
    mismatch: np.ndarray | None = None   # (n, n) strictly upper triangular

    @property
    def num_spins(self) -> int:
        return len(self.b)


@dataclass
class ExactMarginals:
    marginals: np.ndarray      # (n, 2): [p(s=+1), p(s=-1)]
    log_z: float


def lattice_edges(side: int) -> np.ndarray:
    """4-neighbour grid with open boundary, row-major ids, each pair once."""
    edges = []
    for r in range(side):
        for c in range(side):
            i = r * side + c
            if c + 1 < side:
                edges.append((i, i + 1))
            if r + 1 < side:
                edges.append((i, i + side))
    return np.array(edges, dtype=np.int64).reshape(-1, 2)


def sample_ising(rng, side=4) -> IsingModel:
    if side < 1:
        raise ValueError("side must be >= 1")
    if side * side > MAX_EXACT_SPINS:
        raise TooLargeForExactOracle(f"{side * side} spins exceeds {MAX_EXACT_SPINS}")
    edges = lattice_edges(side)
    b = rng.normal(0.0, BIAS_STD, size=side * side)
    J = rng.normal(0.0, 1.0, size=len(edges))
    return IsingModel(side=side, b=b, edges=edges, J=J)


def add_mismatch(model: IsingModel, u, rng) -> IsingModel:
    """Hidden couplings ``u_ij ~ U(0, u)`` on every pair i<j; ``u = 0`` is the identity."""
    if u < 0:
        raise ValueError("u must be >= 0")
    if u == 0:
        return model
    n = model.num_spins
    U = np.zeros((n, n))
    iu = np.triu_indices(n, k=1)
    U[iu] = rng.uniform(0.0, u, size=len(iu[0]))
    return replace(model, mismatch=U)


def ising_to_factor_graph(model: IsingModel) -> FactorGraph:
    """Inference graph: lattice couplings as pairwise factors, biases folded as priors.

    Mismatch couplings are deliberately left out.  Node attribute is ``b``,
    factor attribute is ``J``.
    """
    n = model.num_spins
    factors = [Factor.pairwise_exp(int(i), int(j), float(J))
               for (i, j), J in zip(model.edges, model.J)]
    b = np.asarray(model.b, dtype=np.float64)
    logits = np.stack([b, -b], axis=1)
    priors = np.exp(logits - logits.max(axis=1, keepdims=True))
    priors /= priors.sum(axis=1, keepdims=True)
    return FactorGraph([2] * n, factors, priors=priors,
                       node_attributes=b[:, None],
                       factor_attributes=np.asarray(model.J, dtype=np.float64)[:, None])


def _coupling_matrix(model: IsingModel) -> np.ndarray:
    n = model.num_spins
    W = np.zeros((n, n))
    if len(model.edges):
        np.add.at(W, (model.edges[:, 0], model.edges[:, 1]), model.J)
    if model.mismatch is not None:
        W += np.triu(model.mismatch, k=1)
    return W


def _spins(start, count, n):
    idx = np.arange(start, start + count, dtype=np.int64)[:, None]
    bits = (idx >> np.arange(n, dtype=np.int64)) & 1
    return 1.0 - 2.0 * bits


def exact_marginals(model: IsingModel) -> ExactMarginals:
    """Enumerate all ``2**n`` configurations of the full model in log space.

    Blocks of configurations are reduced separately and merged with
    log-sum-exp, so memory stays bounded.
    """
    n = model.num_spins
    if n > MAX_EXACT_SPINS:
        raise TooLargeForExactOracle(f"{n} spins exceeds {MAX_EXACT_SPINS}")
    W = _coupling_matrix(model)
    b = np.asarray(model.b, dtype=np.float64)
    total = 1 << n
    chunk = min(total, 1 << _CHUNK_BITS)
    # per block: log Z and log of the mass with s_i = +1
    log_z_parts, log_plus_parts = [], []
    for start in range(0, total, chunk):
        S = _spins(start, chunk, n)
        logw = S @ b + np.einsum("ki,ij,kj->k", S, W, S)
        log_z_parts.append(logsumexp(logw))
        plus = S > 0
        masked = np.where(plus, logw[:, None], -np.inf)
        log_plus_parts.append(logsumexp(masked, axis=0))
    log_z = float(logsumexp(log_z_parts))
    log_plus = logsumexp(np.array(log_plus_parts), axis=0)
    p_plus = np.exp(log_plus - log_z)
    marg = np.stack([p_plus, 1.0 - p_plus], axis=1)
    marg /= marg.sum(axis=1, keepdims=True)
    return ExactMarginals(marginals=marg, log_z=log_z)


def kl_marginals(true_marginals, estimated) -> float:
    """Mean over variables of ``sum_s p(s) ln(p(s) / q(s))``, q clamped at 1e-12."""
    p = np.asarray(true_marginals, dtype=np.float64)
    q = np.maximum(np.asarray(estimated, dtype=np.float64), PROB_FLOOR)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return float(max(terms.sum(axis=-1).mean(), 0.0))


@dataclass
class IsingInstance:
    model: IsingModel
    graph: FactorGraph
    exact: ExactMarginals


def make_instance(rng, u=0.0, side=4) -> IsingInstance:
    model = add_mismatch(sample_ising(rng, side), u, rng)
    return IsingInstance(model=model, graph=ising_to_factor_graph(model),
                         exact=exact_marginals(model))


def make_instances(count, seed, u=0.0, side=4, stream=0):
    """``count`` instances from a dedicated stream of ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))
    return [make_instance(rng, u, side) for _ in range(count)]


def bp_kl(instances, iterations=ISING_ITERATIONS, damping=None) -> np.ndarray:
    """Per-instance KL of (optionally damped) BP marginals."""
    return np.array([kl_marginals(inst.exact.marginals,
                                  run_bp(inst.graph, iterations, damping)[1])
                     for inst in instances])


def select_damping(instances, grid=DAMPING_GRID, iterations=ISING_ITERATIONS):
    """Damping factor from ``grid`` with the lowest mean KL on ``instances``."""
    scores = [bp_kl(instances, iterations, a).mean() for a in grid]
    k = int(np.argmin(scores))
    return grid[k], scores
