"""Regenerate the FG-GNN regression anchor (run from the repo root)."""
import json
import pathlib

import numpy as np

from neuralbp import diff_engine as de, fg_gnn
from neuralbp.factor_graph import Factor, FactorGraph


def toy_output():
    rng = np.random.default_rng(2024)
    g = FactorGraph([2, 2], [Factor.parity([0, 1])], priors=[[0.8, 0.2], [0.4, 0.6]],
                    node_attributes=[[0.5], [-1.0]])
    cfg = fg_gnn.GnnConfig(hidden=4, node_attr=3)
    params = de.ModelParams()
    fg_gnn.init_fg_gnn(params, cfg, rng)
    v2f = np.array([[0.8, 0.2], [0.4, 0.6]])
    f2v = np.array([[0.4, 0.6], [0.8, 0.2]])
    attrs = fg_gnn.encode_bp_messages(g, v2f, f2v)
    state = fg_gnn.initial_state(g, 4, rng)
    out = fg_gnn.fg_gnn_apply(state, attrs, g, params, rounds=2)
    return out.h_x.value, out.m_f2x.value


if __name__ == "__main__":
    h, m = toy_output()
    path = pathlib.Path(__file__).with_name("fg_gnn_toy.json")
    path.write_text(json.dumps({"h_x": h.tolist(), "m_f2x": m.tolist()}, indent=1) + "\n")
