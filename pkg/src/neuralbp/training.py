"""Loss, online data generation, and the training loop for learned decoders."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import diff_engine as de
from . import ising
from . import ldpc_channel as lc
from .decoders import node_attributes
from .factor_graph import Factor, FactorGraph
from .nebp import ModelConfig, hard_decisions, infer, init_model, run_nebp

log = logging.getLogger(__name__)

P_CLAMP = 1e-12
HISTORY_COLUMNS = ("step", "loss", "bce", "regularizer", "validation")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step, best):
        super().__init__(f"non-finite loss or gradient at step {step}")
        self.step = step
        self.best = best


@dataclass
class TrainConfig:
    experiment: str = "ldpc"
    model: str = "nebp"
    iterations: int = 20
    rounds: int = 2
    hidden: int = 32
    activation: str = "selu"
    lr: float = 2e-4
    batch_size: int = 1
    epochs: int = 0               # 0: stop on validation patience only
    epoch_size: int = 1000
    max_steps: int = 0            # 0: no cap
    validate_every: int = 500
    patience: int = 10
    seed: int = 0
    snr_db: tuple = (0.0, 1.0, 2.0, 3.0, 4.0)
    sigma_b_max: float = 5.0
    rho: float = lc.DEFAULT_RHO
    codeword: str = "random"      # "random" (encoded) or "zeros"
    val_per_snr: int = 150
    u: float = 0.0
    train_instances: int = 1000
    val_instances: int = 100
    fu_bias_init: float = -6.0
    zero_fu: bool = False
    alist: str = ""

    def __post_init__(self):
        if self.experiment not in ("ldpc", "ising"):
            raise ValueError(f"experiment must be ldpc or ising, got {self.experiment!r}")
        if self.model not in ("nebp", "fg-gnn"):
            raise ValueError(f"model must be nebp or fg-gnn, got {self.model!r}")
        if self.codeword not in ("random", "zeros"):
            raise ValueError("codeword must be random or zeros")
        if self.batch_size < 1 or self.validate_every < 1 or self.iterations < 0:
            raise ValueError("batch_size and validate_every must be >= 1, iterations >= 0")
        self.snr_db = tuple(float(s) for s in self.snr_db)

    @classmethod
    def for_experiment(cls, experiment, **overrides):
        """Defaults of the published setup for ``experiment``."""
        base = {}
        if experiment == "ising":
            base = dict(iterations=10, hidden=64, activation="leaky_relu", lr=1e-5,
                        epochs=400, epoch_size=1000, patience=0)
        base.update(overrides)
        return cls(experiment=experiment, **base)

    def model_config(self) -> ModelConfig:
        if self.experiment == "ldpc":
            node_attr, factor_attr = 4, 0
        else:
            node_attr, factor_attr = 3, 1
        return ModelConfig(kind=self.model, hidden=self.hidden, activation=self.activation,
                           iterations=self.iterations, rounds=self.rounds,
                           node_attr=node_attr, factor_attr=factor_attr,
                           fu_bias_init=self.fu_bias_init, zero_fu=self.zero_fu)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["snr_db"] = list(self.snr_db)
        return d


@dataclass
class TrainRecord:
    step: int
    loss: float
    bce: float
    regularizer: float
    validation: float | None = None
    wall_time: float = 0.0


def nebp_loss(p1, targets, fu_outputs=(), iterations=1):
    """Mean binary cross entropy plus the f_u regularizer.

    ``p1`` is the taped ``P(x=1)`` per variable, ``targets`` the ground truth
    (hard bits or soft probabilities), ``fu_outputs`` one scalar tensor per
    iteration holding the mean f_u output.  Returns ``(loss, bce, reg)``.
    """
    p = de.clamp(p1, P_CLAMP, 1.0 - P_CLAMP)
    bce = de.bce(p, np.asarray(targets, dtype=np.float64))
    if not fu_outputs:
        return bce, float(bce.value), 0.0
    reg = fu_outputs[0]
    for r in fu_outputs[1:]:
        reg = de.add(reg, r)
    reg = de.mul(reg, 1.0 / max(iterations, 1))
    loss = de.add(bce, reg)
    return loss, float(bce.value), float(reg.value)


# -- data ---------------------------------------------------------------------

@dataclass
class LdpcBatch:
    graph: object
    bits: np.ndarray          # (B, n)
    received: np.ndarray      # (B, n)
    snr_db: np.ndarray        # (B,)
    sigma_b: np.ndarray       # (B,)


def _code(cfg: TrainConfig):
    return lc.load_alist(cfg.alist) if cfg.alist else lc.default_code()


def generate_ldpc_batch(rng, cfg: TrainConfig, pcm, count=1, snr_db=None,
                        generator=None) -> LdpcBatch:
    """``count`` codewords through the bursty channel, as one disjoint-union graph.

    Per codeword: SNR drawn from ``cfg.snr_db`` (unless given), ``sigma_b``
    from U(0, sigma_b_max).  Priors use the Gaussian noise level only.
    """
    bits = np.zeros((count, pcm.n), dtype=np.int64)
    r = np.zeros((count, pcm.n))
    snrs = np.zeros(count)
    sbs = np.zeros(count)
    priors = np.zeros((count, pcm.n, 2))
    attrs = np.zeros((count, pcm.n, 2))
    for k in range(count):
        snr = float(rng.choice(cfg.snr_db)) if snr_db is None else float(snr_db)
        sb = float(rng.uniform(0.0, cfg.sigma_b_max))
        if cfg.codeword == "random":
            G = lc.generator_matrix(pcm) if generator is None else generator
            x = lc.random_codewords(G, 1, rng)[0]
        else:
            x = np.zeros(pcm.n, dtype=np.int64)
        chan = lc.ChannelConfig(snr, rho=cfg.rho, sigma_b=sb, rate=pcm.rate)
        sample = lc.transmit(x, chan, rng)
        bits[k], r[k], snrs[k], sbs[k] = x, sample.received, snr, sb
        priors[k] = lc.channel_priors(r[k], chan.sigma_c)
        attrs[k] = node_attributes(r[k], snr)
    graph = lc.build_ldpc_factor_graph(pcm, priors, attrs)
    return LdpcBatch(graph=graph, bits=bits, received=r, snr_db=snrs, sigma_b=sbs)


def generate_ldpc_sample(rng, cfg: TrainConfig, pcm=None) -> LdpcBatch:
    return generate_ldpc_batch(rng, cfg, _code(cfg) if pcm is None else pcm, 1)


def ldpc_validation_set(cfg: TrainConfig, pcm, chunk=150):
    """Fixed validation codewords: ``val_per_snr`` per SNR, in chunks of ``chunk``."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    G = lc.generator_matrix(pcm)
    out = []
    for snr in cfg.snr_db:
        left = cfg.val_per_snr
        while left > 0:
            c = min(chunk, left)
            out.append(generate_ldpc_batch(rng, cfg, pcm, c, snr_db=snr, generator=G))
            left -= c
    return out


def validation_ber(params, batches, seed=0) -> float:
    errors = total = 0
    for k, b in enumerate(batches):
        run = infer(b.graph, params, seed=np.random.default_rng([seed, k]))
        errors += int(np.count_nonzero(hard_decisions(run.marginals) != b.bits.reshape(-1)))
        total += b.bits.size
    return errors / max(total, 1)


def ising_batch(instances):
    """Disjoint union of Ising instances and the stacked soft targets P(s=-1)."""
    if len(instances) == 1:
        inst = instances[0]
        return inst.graph, inst.exact.marginals[:, 1]
    factors, offset = [], 0
    for inst in instances:
        factors += [Factor.pairwise_exp(f.scope[0] + offset, f.scope[1] + offset, f.coupling)
                    for f in inst.graph.factors]
        offset += inst.graph.num_variables
    g = FactorGraph([2] * offset, factors,
                    priors=np.concatenate([i.graph.priors for i in instances]),
                    node_attributes=np.concatenate([i.graph.node_attributes for i in instances]),
                    factor_attributes=np.concatenate([i.graph.factor_attributes for i in instances]))
    return g, np.concatenate([i.exact.marginals[:, 1] for i in instances])


def generate_ising_sample(rng, cfg: TrainConfig):
    """One fresh instance: (inference graph, exact P(s=-1) per spin)."""
    inst = ising.make_instance(rng, cfg.u)
    return inst.graph, inst.exact.marginals[:, 1]


def ising_validation_kl(params, instances, seed=0) -> float:
    kls = [ising.kl_marginals(inst.exact.marginals,
                              infer(inst.graph, params, seed=np.random.default_rng([seed, k])).marginals)
           for k, inst in enumerate(instances)]
    return float(np.mean(kls))


# -- loop -----------------------------------------------------------------------

@dataclass
class TrainResult:
    params: de.ModelParams
    history: list = field(default_factory=list)
    best_metric: float = float("inf")
    best_step: int = 0
    steps: int = 0
    stop_reason: str = ""


def history_csv(history) -> str:
    """History as CSV text; wall time is left out so reruns are byte-identical."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in history:
        w.writerow([r.step, repr(r.loss), repr(r.bce), repr(r.regularizer),
                    "" if r.validation is None else repr(r.validation)])
    return buf.getvalue()


def _stream(seed, k):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))


def train(cfg: TrainConfig, checkpoint=None, history_path=None, progress=None) -> TrainResult:
    """Train a learned decoder; returns the best-validation parameters.

    Validation runs every ``validate_every`` steps (and at step 0).  LDPC
    stops after ``patience`` evaluations without improvement; training also
    stops after ``epochs * epoch_size`` steps when ``epochs > 0`` and after
    ``max_steps`` when that is positive.  ``checkpoint`` receives the best
    parameters whenever they improve.
    """
    init_rng, data_rng = _stream(cfg.seed, 0), _stream(cfg.seed, 1)
    params = init_model(cfg.model_config(), init_rng)
    params.meta["train"] = cfg.to_dict()

    if cfg.experiment == "ldpc":
        pcm = _code(cfg)
        G = lc.generator_matrix(pcm)
        val = ldpc_validation_set(cfg, pcm)
        evaluate = lambda p: validation_ber(p, val, cfg.seed)  # noqa: E731

        def draw():
            b = generate_ldpc_batch(data_rng, cfg, pcm, cfg.batch_size, generator=G)
            return b.graph, b.bits.reshape(-1)
    else:
        train_set = ising.make_instances(cfg.train_instances, cfg.seed, cfg.u, stream=3)
        val = ising.make_instances(cfg.val_instances, cfg.seed, cfg.u, stream=2)
        evaluate = lambda p: ising_validation_kl(p, val, cfg.seed)  # noqa: E731
        order = []

        def draw():
            picks = []
            for _ in range(cfg.batch_size):
                if not order:
                    order.extend(data_rng.permutation(len(train_set)).tolist())
                picks.append(train_set[order.pop()])
            return ising_batch(picks)

    limit = cfg.epochs * cfg.epoch_size if cfg.epochs > 0 else 0
    if cfg.max_steps > 0:
        limit = cfg.max_steps if limit == 0 else min(limit, cfg.max_steps)
    if limit == 0 and cfg.patience <= 0:
        raise ValueError("training needs epochs, max_steps or patience to stop")

    result = TrainResult(params=params.copy())
    result.best_metric = evaluate(params)
    result.history.append(TrainRecord(0, float("nan"), float("nan"), float("nan"),
                                      result.best_metric))
    if checkpoint:
        de.save_checkpoint(_tagged(result.params, result.best_metric, 0), checkpoint)
    t0 = time.perf_counter()
    bad = 0
    step = 0
    result.stop_reason = "step limit"
    while limit == 0 or step < limit:
        step += 1
        graph, targets = draw()
        params.zero_grad()
        with de.Tape() as tape:
            if cfg.model == "nebp":
                run = run_nebp(graph, params, seed=data_rng)
            else:
                run = infer(graph, params, seed=data_rng)
            loss, bce_v, reg_v = nebp_loss(run.p1, targets, getattr(run, "fu_outputs", ()),
                                           cfg.iterations)
            if not np.isfinite(loss.value):
                raise NonFiniteLoss(step, result)
            tape.backward(loss)
        try:
            de.adam_step(params, lr=cfg.lr)
        except de.NonFiniteGradient as exc:
            raise NonFiniteLoss(step, result) from exc
        rec = TrainRecord(step, float(loss.value), bce_v, reg_v,
                          wall_time=time.perf_counter() - t0)
        if step % cfg.validate_every == 0:
            rec.validation = evaluate(params)
            if rec.validation < result.best_metric:
                result.best_metric, result.best_step = rec.validation, step
                result.params = params.copy()
                bad = 0
                if checkpoint:
                    de.save_checkpoint(_tagged(result.params, rec.validation, step), checkpoint)
            else:
                bad += 1
            log.info("step %d loss %.5f validation %.6g (best %.6g at %d) %.0fs", step,
                     rec.loss, rec.validation, result.best_metric, result.best_step, rec.wall_time)
            if progress:
                progress(rec)
        result.history.append(rec)
        if cfg.patience > 0 and bad >= cfg.patience:
            result.stop_reason = "patience"
            break
    result.steps = step
    if history_path:
        with open(history_path, "w", newline="") as fh:
            fh.write(history_csv(result.history))
    return result


def _tagged(params, metric, step):
    p = params.copy()
    p.meta["best_validation"] = float(metric)
    p.meta["best_step"] = int(step)
    return p


def config_json(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
