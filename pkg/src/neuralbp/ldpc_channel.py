"""LDPC codes, the bursty BPSK channel, channel priors, and BER evaluation.

Conventions: BPSK maps bit 0 to +1 and bit 1 to -1.  SNR is Eb/N0 in dB,
so the AWGN standard deviation is ``sqrt(1 / (2 * rate * 10**(snr/10)))``.
The bursty channel adds ``p_i * w_i`` with ``p_i ~ Bernoulli(rho)`` and
``w_i ~ N(0, sigma_b^2)`` on top of the Gaussian noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.special import expit
from scipy.stats import beta as beta_dist

from .factor_graph import Factor, FactorGraph

DEFAULT_CODE = "ldpc_96_48_3_6.alist"
DEFAULT_RHO = 0.05
MIN_BIT_ERRORS = 200


class AlistError(ValueError):
    pass


class MalformedHeader(AlistError):
    pass


class DegreeMismatch(AlistError):
    pass


class IndexOutOfRange(AlistError):
    pass


class FrameCapExceeded(RuntimeError):
    def __init__(self, result):
        super().__init__(f"frame cap hit after {result.frames} frames "
                         f"with {result.bit_errors} bit errors")
        self.result = result


@dataclass(frozen=True)
class ParityCheckMatrix:
    """Binary ``(m, n)`` parity-check matrix with row/column adjacency."""

    H: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.uint8)
        if H.ndim != 2 or np.any(H > 1):
            raise ValueError("H must be a 2-D binary matrix")
        H.setflags(write=False)
        object.__setattr__(self, "H", H)

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[1]

    @property
    def rate(self) -> float:
        return (self.n - self.m) / self.n

    @property
    def check_adjacency(self):
        return [np.flatnonzero(row) for row in self.H]

    @property
    def bit_adjacency(self):
        return [np.flatnonzero(col) for col in self.H.T]

    @property
    def row_weights(self):
        return self.H.sum(axis=1).astype(int)

    @property
    def col_weights(self):
        return self.H.sum(axis=0).astype(int)

    def syndrome(self, x) -> np.ndarray:
        return (np.asarray(x) @ self.H.T.astype(np.int64)) % 2


# -- alist ------------------------------------------------------------------

def _ints(line, what):
    try:
        return [int(tok) for tok in line.split()]
    except ValueError as exc:
        raise MalformedHeader(f"{what}: non-integer token in {line!r}") from exc


def parse_alist(text: str) -> ParityCheckMatrix:
    """Parse MacKay's alist format.

    Grammar (whitespace separated, one record per line)::

        n m                       columns (bits), rows (checks)
        max_col_deg max_row_deg
        col_deg[0] ... col_deg[n-1]
        row_deg[0] ... row_deg[m-1]
        n lines: 1-based row indices of each column (0 = padding)
        m lines: 1-based column indices of each row (0 = padding)

    Both adjacency blocks must describe the same edge set.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 4:
        raise MalformedHeader("alist needs at least four header lines")
    head = _ints(lines[0], "dimensions")
    if len(head) != 2 or min(head) <= 0:
        raise MalformedHeader(f"bad dimension line {lines[0]!r}")
    n, m = head
    maxes = _ints(lines[1], "max degrees")
    if len(maxes) != 2:
        raise MalformedHeader(f"bad max-degree line {lines[1]!r}")
    col_deg = _ints(lines[2], "column degrees")
    row_deg = _ints(lines[3], "row degrees")
    if len(col_deg) != n or len(row_deg) != m:
        raise DegreeMismatch("degree list lengths do not match n, m")
    if max(col_deg) > maxes[0] or max(row_deg) > maxes[1]:
        raise DegreeMismatch("degree exceeds declared maximum")
    if len(lines) < 4 + n + m:
        raise MalformedHeader(f"expected {n + m} adjacency lines, got {len(lines) - 4}")

    H_cols = np.zeros((m, n), dtype=np.uint8)
    for j in range(n):
        idx = [v for v in _ints(lines[4 + j], f"column {j}") if v != 0]
        if len(idx) != col_deg[j]:
            raise DegreeMismatch(f"column {j}: {len(idx)} entries, degree {col_deg[j]}")
        for v in idx:
            if not 1 <= v <= m:
                raise IndexOutOfRange(f"column {j}: row index {v} outside 1..{m}")
            H_cols[v - 1, j] = 1
    H_rows = np.zeros((m, n), dtype=np.uint8)
    for i in range(m):
        idx = [v for v in _ints(lines[4 + n + i], f"row {i}") if v != 0]
        if len(idx) != row_deg[i]:
            raise DegreeMismatch(f"row {i}: {len(idx)} entries, degree {row_deg[i]}")
        for v in idx:
            if not 1 <= v <= n:
                raise IndexOutOfRange(f"row {i}: column index {v} outside 1..{n}")
            H_rows[i, v - 1] = 1
    if not np.array_equal(H_cols, H_rows):
        raise DegreeMismatch("row and column adjacency lists disagree")
    return ParityCheckMatrix(H_rows)


def write_alist(pcm: ParityCheckMatrix) -> str:
    H = pcm.H
    m, n = H.shape
    cw, rw = pcm.col_weights, pcm.row_weights
    out = [f"{n} {m}", f"{cw.max()} {rw.max()}",
           " ".join(map(str, cw)), " ".join(map(str, rw))]
    for j in range(n):
        idx = list(np.flatnonzero(H[:, j]) + 1) + [0] * (cw.max() - cw[j])
        out.append(" ".join(map(str, idx)))
    for i in range(m):
        idx = list(np.flatnonzero(H[i]) + 1) + [0] * (rw.max() - rw[i])
        out.append(" ".join(map(str, idx)))
    return "\n".join(out) + "\n"


def load_alist(path) -> ParityCheckMatrix:
    with open(path) as fh:
        return parse_alist(fh.read())


@lru_cache(maxsize=None)
def default_code() -> ParityCheckMatrix:
    """The bundled (96, 48) code: column weight 3, row weight 6, no 4-cycles."""
    text = resources.files("neuralbp.data").joinpath(DEFAULT_CODE).read_text()
    return parse_alist(text)


def has_four_cycle(H) -> bool:
    H = np.asarray(H, dtype=np.int64)
    overlap = H @ H.T
    np.fill_diagonal(overlap, 0)
    return bool(np.any(overlap > 1))


def regular_ldpc_matrix(n, col_weight, row_weight, rng, max_tries=1000) -> ParityCheckMatrix:
    """Random (col_weight, row_weight)-regular matrix without 4-cycles.

    Progressive edge growth: each new edge of a bit goes to a check that is
    not yet within distance two of it and still has spare degree, choosing
    among the least-loaded such checks at random.
    """
    m = n * col_weight // row_weight
    if m * row_weight != n * col_weight:
        raise ValueError("n * col_weight must be divisible by row_weight")
    for _ in range(max_tries):
        H = np.zeros((m, n), dtype=np.uint8)
        ok = True
        for j in rng.permutation(n):
            for _k in range(col_weight):
                mine = np.flatnonzero(H[:, j])
                load = H.sum(axis=1)
                free = load < row_weight
                if len(mine):
                    bits = np.flatnonzero(H[mine].any(axis=0))
                    free[H[:, bits].any(axis=1)] = False
                cand = np.flatnonzero(free)
                if not len(cand):
                    ok = False
                    break
                cand = cand[load[cand] == load[cand].min()]
                H[rng.choice(cand), j] = 1
            if not ok:
                break
        if ok:
            return ParityCheckMatrix(H)
    raise RuntimeError("could not build a 4-cycle-free matrix")


# -- GF(2) encoding ---------------------------------------------------------

def generator_matrix(pcm: ParityCheckMatrix) -> np.ndarray:
    """Rows spanning the null space of H over GF(2), shape ``(n - rank, n)``."""
    H = pcm.H.astype(np.uint8).copy()
    m, n = H.shape
    pivots = []
    r = 0
    for c in range(n):
        if r >= m:
            break
        rows = np.flatnonzero(H[r:, c]) + r
        if not len(rows):
            continue
        p = rows[0]
        if p != r:
            H[[r, p]] = H[[p, r]]
        others = np.flatnonzero(H[:, c])
        others = others[others != r]
        H[others] ^= H[r]
        pivots.append(c)
        r += 1
    free = [c for c in range(n) if c not in set(pivots)]
    G = np.zeros((len(free), n), dtype=np.uint8)
    for k, f in enumerate(free):
        G[k, f] = 1
        for i, pc in enumerate(pivots):
            G[k, pc] = H[i, f]
    return G


def random_codewords(G, count, rng) -> np.ndarray:
    u = rng.integers(0, 2, size=(count, G.shape[0]))
    return (u @ G.astype(np.int64)) % 2


# -- channel ----------------------------------------------------------------

def snr_to_sigma(snr_db, rate=0.5) -> float:
    if not 0.0 < rate <= 1.0:
        raise ValueError("rate must lie in (0, 1]")
    return math.sqrt(1.0 / (2.0 * rate * 10.0 ** (snr_db / 10.0)))


def bursty_adjusted_sigma(sigma_c, rho=DEFAULT_RHO, sigma_b_max=5.0) -> float:
    """Std of ``z + p*w`` when ``sigma_b ~ U(0, sigma_b_max)``."""
    second_moment = sigma_b_max ** 2 / 3.0
    return math.sqrt(sigma_c ** 2 + (rho * (1.0 - rho) + rho ** 2) * second_moment)


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float
    rho: float = DEFAULT_RHO
    sigma_b: float = 0.0
    rate: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.sigma_b < 0:
            raise ValueError("sigma_b must be >= 0")

    @property
    def sigma_c(self) -> float:
        return snr_to_sigma(self.snr_db, self.rate)


@dataclass
class ChannelSample:
    bits: np.ndarray
    symbols: np.ndarray
    received: np.ndarray
    burst_mask: np.ndarray
    gaussian: np.ndarray
    burst: np.ndarray
    config: ChannelConfig


def bpsk(bits) -> np.ndarray:
    return 1.0 - 2.0 * np.asarray(bits, dtype=np.float64)


def transmit(bits, config: ChannelConfig, rng, sigma_c=None) -> ChannelSample:
    """Send ``bits`` (any shape) through the bursty channel.

    ``sigma_c`` overrides the SNR-derived Gaussian std (0 gives a noiseless
    Gaussian part).
    """
    bits = np.asarray(bits, dtype=np.int64)
    s = bpsk(bits)
    sc = config.sigma_c if sigma_c is None else sigma_c
    z = rng.normal(0.0, 1.0, size=s.shape) * sc
    p = (rng.random(size=s.shape) < config.rho).astype(np.int64)
    w = rng.normal(0.0, 1.0, size=s.shape) * config.sigma_b
    r = s + z + p * w
    return ChannelSample(bits=bits, symbols=s, received=r, burst_mask=p,
                         gaussian=z, burst=w, config=config)


def channel_priors(r, sigma) -> np.ndarray:
    """``[P(x=0 | r), P(x=1 | r)]`` for BPSK under N(0, sigma^2) noise."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    p1 = expit(-2.0 * np.asarray(r, dtype=np.float64) / sigma ** 2)
    return np.stack([1.0 - p1, p1], axis=-1)


def bits_baseline(r, sigma=1.0) -> np.ndarray:
    """Per-bit maximum likelihood; equals the sign rule (r = 0 decodes to 0)."""
    return (np.asarray(r) < 0).astype(np.int64)


# -- factor graph -----------------------------------------------------------

@lru_cache(maxsize=32)
def _structure(H_bytes, shape, copies):
    H = np.frombuffer(H_bytes, dtype=np.uint8).reshape(shape)
    m, n = shape
    factors = []
    for c in range(copies):
        for row in H:
            factors.append(Factor.parity(np.flatnonzero(row) + c * n))
    return FactorGraph([2] * (n * copies), factors)


def ldpc_structure(pcm: ParityCheckMatrix, copies=1) -> FactorGraph:
    """Parity factors only (uniform priors), cached; ``copies`` disjoint codewords."""
    return _structure(pcm.H.tobytes(), pcm.H.shape, copies)


def build_ldpc_factor_graph(pcm: ParityCheckMatrix, priors, node_attributes=None) -> FactorGraph:
    """One parity factor per row of H and the channel likelihoods folded as priors.

    ``priors`` may be ``(n, 2)`` or ``(copies, n, 2)``; the latter builds a
    disjoint union of ``copies`` codeword graphs.
    """
    pri = np.asarray(priors, dtype=np.float64)
    copies = 1 if pri.ndim == 2 else pri.shape[0]
    if pri.reshape(-1, 2).shape[0] != copies * pcm.n:
        raise ValueError("priors must have n rows per codeword")
    base = ldpc_structure(pcm, copies)
    na = None if node_attributes is None else np.asarray(node_attributes).reshape(copies * pcm.n, -1)
    return base.with_priors(pri.reshape(-1, 2), node_attributes=na)


# -- BER --------------------------------------------------------------------

def clopper_pearson(k, n, level=0.95):
    if n == 0:
        return 0.0, 1.0
    a = (1.0 - level) / 2.0
    lo = 0.0 if k == 0 else float(beta_dist.ppf(a, k, n - k + 1))
    hi = 1.0 if k == n else float(beta_dist.ppf(1.0 - a, k + 1, n - k))
    return lo, hi


def min_frames(ber_estimate, n, min_errors=MIN_BIT_ERRORS) -> int:
    """Codewords needed to expect ``min_errors`` bit errors at ``ber_estimate``."""
    return math.ceil(min_errors / (ber_estimate * n) - 1e-9)


@dataclass
class BerResult:
    frames: int
    bits: int
    bit_errors: int
    ber: float
    ci_low: float
    ci_high: float
    capped: bool = False
    extra: dict = field(default_factory=dict)


def batch_rng(seed, index, stream=0):
    """Independent generator for batch ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index, stream)))


def evaluate_ber(decoder, config: ChannelConfig, n=None, *, seed=0,
                 min_errors=MIN_BIT_ERRORS, max_frames=100_000, batch=64,
                 codewords=None, sigma_c=None, strict=False) -> BerResult:
    """Monte-Carlo BER of ``decoder`` until ``min_errors`` bit errors or the frame cap.

    ``decoder(received, config, rng)`` maps a ``(B, n)`` array of received
    values to ``(B, n)`` bit decisions.  ``codewords`` is None (all-zeros
    transmission, needs ``n``) or a callable ``(count, rng) -> bits``.
    Batch ``i`` uses its own seeded stream, so results depend only on
    ``seed`` and the arguments.
    """
    frames = errors = 0
    i = 0
    while errors < min_errors and frames < max_frames:
        b = min(batch, max_frames - frames)
        rng = batch_rng(seed, i, 0)
        bits = np.zeros((b, n), dtype=np.int64) if codewords is None else codewords(b, rng)
        sample = transmit(bits, config, rng, sigma_c=sigma_c)
        decided = np.asarray(decoder(sample.received, config, batch_rng(seed, i, 1)))
        errors += int(np.count_nonzero(decided != bits))
        frames += b
        i += 1
    nbits = frames * bits.shape[1]
    lo, hi = clopper_pearson(errors, nbits)
    res = BerResult(frames=frames, bits=nbits, bit_errors=errors, ber=errors / nbits,
                    ci_low=lo, ci_high=hi, capped=errors < min_errors)
    if strict and res.capped:
        raise FrameCapExceeded(res)
    return res
