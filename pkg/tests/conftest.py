import itertools

import numpy as np
import pytest

from neuralbp.factor_graph import FactorKind


def enumerate_marginals(graph):
    """Brute-force marginals: sum the full joint over every assignment."""
    card = [int(c) for c in graph.cardinality]
    K = max(card) if card else 2
    out = np.zeros((len(card), K))
    total = 0.0
    for states in itertools.product(*[range(c) for c in card]):
        w = 1.0
        for v, s in enumerate(states):
            w *= graph.priors[v, s]
        for fac in graph.factors:
            local = tuple(states[v] for v in fac.scope)
            if fac.kind == FactorKind.TABLE:
                w *= fac.table[local]
            elif fac.kind == FactorKind.PARITY:
                w *= float(sum(local) % 2 == 0)
            else:
                si, sj = (1 - 2 * local[0]), (1 - 2 * local[1])
                w *= np.exp(fac.coupling * si * sj)
        total += w
        for v, s in enumerate(states):
            out[v, s] += w
    return out / total


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
