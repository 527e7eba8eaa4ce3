"""Sum-product belief propagation on factor graphs with learned message refinement."""
from .factor_graph import Factor, FactorGraph, build_graph, fold_singleton_factors, replicate
from .kernels import BACKEND
from .sum_product import bp_step, marginals, run_bp

__version__ = "0.1.0"

__all__ = ["BACKEND", "Factor", "FactorGraph", "bp_step", "build_graph",
           "fold_singleton_factors", "marginals", "replicate", "run_bp"]
