"""Frame decoders for the BER harness.

Every decoder has the signature ``decode(received, config, rng) -> bits`` with
``received`` of shape ``(B, n)``.  A batch of frames is decoded as one
disjoint-union factor graph.
"""
from __future__ import annotations

import numpy as np

from . import ldpc_channel as lc
from .nebp import hard_decisions, infer, model_config
from .sum_product import LDPC_ITERATIONS, run_bp

DECODERS = ("bits", "ldpc-bp", "ldpc-bursty", "fg-gnn", "nebp")
LEARNED = ("fg-gnn", "nebp")


class MissingCheckpoint(ValueError):
    pass


def node_attributes(received, snr_db) -> np.ndarray:
    """Per-bit extras for learned decoders: ``[r_i, snr_db]``."""
    r = np.asarray(received, dtype=np.float64)
    return np.stack([r, np.full_like(r, float(snr_db))], axis=-1)


def decoding_graph(pcm, received, sigma, snr_db):
    r = np.atleast_2d(received)
    return lc.build_ldpc_factor_graph(pcm, lc.channel_priors(r, sigma),
                                      node_attributes(r, snr_db))


def _bits(received, config, rng):
    return lc.bits_baseline(received)


def make_decoder(name, pcm=None, params=None, iterations=None,
                 sigma_b_max=5.0, rho=lc.DEFAULT_RHO):
    """Build a decoder by name (see :data:`DECODERS`).

    ``ldpc-bp`` assumes the Gaussian-only noise level; ``ldpc-bursty`` uses
    the noise level inflated by the expected burst variance.  Learned
    decoders need ``params`` whose model kind matches ``name``.
    """
    if name not in DECODERS:
        raise ValueError(f"unknown decoder {name!r}; choose from {', '.join(DECODERS)}")
    if name == "bits":
        return _bits
    pcm = lc.default_code() if pcm is None else pcm
    n = pcm.n

    if name in ("ldpc-bp", "ldpc-bursty"):
        its = LDPC_ITERATIONS if iterations is None else iterations
        bursty = name == "ldpc-bursty"

        def decode_bp(received, config, rng):
            sigma = config.sigma_c
            if bursty:
                sigma = lc.bursty_adjusted_sigma(sigma, rho, sigma_b_max)
            g = decoding_graph(pcm, received, sigma, config.snr_db)
            return hard_decisions(run_bp(g, its)[1]).reshape(-1, n)
        return decode_bp

    if params is None:
        raise MissingCheckpoint(f"decoder {name!r} needs a checkpoint")
    kind = model_config(params).kind
    if kind != name:
        raise MissingCheckpoint(f"checkpoint holds a {kind!r} model, not {name!r}")

    def decode_learned(received, config, rng):
        g = decoding_graph(pcm, received, config.sigma_c, config.snr_db)
        run = infer(g, params, seed=rng, iterations=iterations)
        return hard_decisions(run.marginals).reshape(-1, n)
    return decode_learned
