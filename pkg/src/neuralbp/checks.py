"""Property checks run by ``neuralbp selftest`` and ``neuralbp gradcheck``.

Each check returns a :class:`CheckResult` holding the worst observed error
and the tolerance it is held to.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import diff_engine as de
from . import ldpc_channel as lc
from .factor_graph import Factor, FactorGraph
from .nebp import ModelConfig, init_model, run_nebp
from .sum_product import parity_check_message, run_bp
from .training import nebp_loss


@dataclass
class CheckResult:
    name: str
    worst: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.worst < self.tolerance)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: worst {self.worst:.3e} (tol {self.tolerance:g}, {self.seconds:.1f}s)"


def brute_force_marginals(graph: FactorGraph) -> np.ndarray:
    """Exact marginals by enumerating every joint state (small graphs only)."""
    card = [int(c) for c in graph.cardinality]
    K = max(card)
    joint = np.ones(card)
    for v in range(graph.num_variables):
        shape = [1] * len(card)
        shape[v] = card[v]
        joint = joint * graph.priors[v, :card[v]].reshape(shape)
    for fac in graph.factors:
        table = factor_table(fac, [card[v] for v in fac.scope])
        shape = [1] * len(card)
        for v in fac.scope:
            shape[v] = card[v]
        joint = joint * table.reshape(shape)
    joint = joint / joint.sum()
    out = np.zeros((len(card), K))
    for v in range(len(card)):
        axes = tuple(a for a in range(len(card)) if a != v)
        out[v, :card[v]] = joint.sum(axis=axes)
    return out


def factor_table(fac: Factor, cards) -> np.ndarray:
    if fac.table is not None:
        return np.asarray(fac.table, dtype=np.float64)
    t = np.zeros(cards)
    for idx in itertools.product(*[range(c) for c in cards]):
        if fac.kind.name == "PARITY":
            t[idx] = float(sum(idx) % 2 == 0)
        else:
            s = [1 - 2 * i for i in idx]
            t[idx] = np.exp(fac.coupling * s[0] * s[1])
    return t


def random_tree_graph(rng, max_vars=10, max_card=3) -> FactorGraph:
    """Random tree: each new variable attaches to an earlier one through a
    pairwise table; some variables also get a three-way factor leaf pair."""
    n = int(rng.integers(1, max_vars + 1))
    card = rng.integers(2, max_card + 1, size=n).tolist()
    factors = []
    v = 1
    while v < n:
        parent = int(rng.integers(0, v))
        if v + 1 < n and rng.random() < 0.3:
            scope = (parent, v, v + 1)
            v += 2
        else:
            scope = (parent, v)
            v += 1
        table = rng.uniform(0.05, 1.0, size=[card[s] for s in scope])
        factors.append(Factor.from_table(scope, table))
    priors = np.zeros((n, max(card)))
    for i, c in enumerate(card):
        priors[i, :c] = rng.dirichlet(np.ones(c))
    return FactorGraph(card, factors, priors=priors)


def check_tree_exactness(count=100, seed=0) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        g = random_tree_graph(rng)
        _, m = run_bp(g, max(g.num_variables, 1) + 1)
        worst = max(worst, float(np.abs(m - brute_force_marginals(g)).max()))
    return CheckResult("tree exactness", worst, 1e-10, time.perf_counter() - t0)


def parity_by_enumeration(incoming) -> np.ndarray:
    """Sum over all assignments of the other bits with even total parity."""
    inc = np.asarray(incoming, dtype=np.float64)
    out = np.zeros(2)
    for bits in itertools.product((0, 1), repeat=len(inc)):
        w = np.prod([inc[k, b] for k, b in enumerate(bits)])
        out[sum(bits) % 2] += w
    return out / out.sum()


def check_parity_rule(count=1000, seed=0) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(count):
        degree = 2 + k % 7
        inc = rng.dirichlet(np.ones(2), size=degree - 1)
        err = np.abs(parity_check_message(inc) - parity_by_enumeration(inc)).max()
        worst = max(worst, float(err))
    return CheckResult("parity rule", worst, 1e-12, time.perf_counter() - t0)


def check_bp_equivalence(seed=0, snr_db=2.0, iterations=20, pcm=None) -> CheckResult:
    """NEBP with f_u switched off reproduces plain BP marginals on the code graph."""
    t0 = time.perf_counter()
    pcm = lc.default_code() if pcm is None else pcm
    rng = np.random.default_rng(seed)
    chan = lc.ChannelConfig(snr_db, sigma_b=2.0)
    r = lc.transmit(np.zeros(pcm.n), chan, rng).received
    g = lc.build_ldpc_factor_graph(pcm, lc.channel_priors(r, chan.sigma_c),
                                   np.stack([r, np.full(pcm.n, snr_db)], axis=1))
    params = init_model(ModelConfig(iterations=iterations), rng)
    learned = run_nebp(g, params, seed=seed, zero_fu=True).marginals
    _, reference = run_bp(g, iterations)
    worst = float(np.abs(learned - reference).max())
    return CheckResult("BP equivalence", worst, 1e-9, time.perf_counter() - t0)


def toy_nebp_problem(seed=0, iterations=3, hidden=8):
    """Small parity-check graph (8 bits), a fresh model, and a replayed loss."""
    rng = np.random.default_rng(seed)
    H = np.array([[1, 1, 1, 0, 1, 0, 0, 0],
                  [0, 1, 1, 1, 0, 1, 0, 0],
                  [1, 0, 1, 1, 0, 0, 1, 0],
                  [1, 1, 0, 1, 0, 0, 0, 1]], dtype=np.uint8)
    pcm = lc.ParityCheckMatrix(H)
    r = 1.0 + rng.normal(0, 0.9, size=8)
    g = lc.build_ldpc_factor_graph(pcm, lc.channel_priors(r, 0.9),
                                   np.stack([r, np.full(8, 1.0)], axis=1))
    cfg = ModelConfig(hidden=hidden, iterations=iterations, fu_bias_init=-1.0)
    params = init_model(cfg, rng)
    for t in params.tensors.values():
        t.value += rng.normal(0, 0.05, size=t.value.shape)
    trace = run_nebp(g, params, seed=seed).bp_trace
    targets = np.zeros(8)

    def loss_fn(p):
        run = run_nebp(g, p, seed=seed, replay=trace)
        return nebp_loss(run.p1, targets, run.fu_outputs, iterations)[0]
    return params, loss_fn


def check_gradients(n_coords=200, seed=0) -> CheckResult:
    t0 = time.perf_counter()
    params, loss_fn = toy_nebp_problem(seed)
    worst, _ = de.gradient_check(loss_fn, params, n_coords=n_coords, h=1e-5,
                                 rng=np.random.default_rng(seed))
    return CheckResult("NEBP gradient", worst, 1e-4, time.perf_counter() - t0)


def run_all(seed=0):
    return [check_tree_exactness(seed=seed), check_parity_rule(seed=seed),
            check_bp_equivalence(seed=seed), check_gradients(seed=seed)]
