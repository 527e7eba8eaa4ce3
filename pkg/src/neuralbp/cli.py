"""Command-line front end.

Commands: train, eval-ber, sweep-sigma-b, ising-table, gradcheck, selftest.
Exit codes: 0 success, 1 usage or configuration error, 2 failed check,
3 runtime error.

Configuration files are INI with the sections ``[train]``, ``[eval]`` and
``[ising]``; every key must be known (see ``neuralbp <command> --help`` and
the README for the schema).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import os
import sys

import numpy as np

from . import diff_engine as de
from . import ising
from . import ldpc_channel as lc
from .checks import check_gradients, run_all
from .decoders import DECODERS, LEARNED, MissingCheckpoint, make_decoder
from .nebp import infer, model_config
from .training import NonFiniteLoss, TrainConfig, train

log = logging.getLogger("neuralbp")

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_RUNTIME = 0, 1, 2, 3

BER_COLUMNS = ("snr_db", "sigma_b", "decoder", "frames", "bit_errors", "ber",
               "ci_low", "ci_high", "capped", "seed", "config_hash")
ISING_COLUMNS = ("u", "method", "kl_mean", "kl_std", "seed", "damping_alpha",
                 "reference_kl", "config_hash")
ISING_METHODS = ("fg-gnn", "bp", "bp-damping", "nebp")

# published KL values per (method, u), logged for comparison only
REFERENCE_KL = {
    "fg-gnn": {0.0: 0.0141, 0.2: 0.0570, 0.4: 0.1170, 0.8: 0.1659},
    "bp": {0.0: 0.0190, 0.2: 0.0711, 0.4: 0.2081, 0.8: 0.3121},
    "bp-damping": {0.0: 0.0055, 0.2: 0.0519, 0.4: 0.1318, 0.8: 0.1961},
    "nebp": {0.0: 0.0091, 0.2: 0.0509, 0.4: 0.1057, 0.8: 0.1697},
}

EVAL_DEFAULTS = {
    "snr_db": [0.0, 1.0, 2.0, 3.0, 4.0],
    "sigma_b": [0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
    "sweep_snr_db": 3.0,
    "min_errors": lc.MIN_BIT_ERRORS,
    "max_frames": 100_000,
    "batch_frames": 128,
    "iterations": 20,
    "rho": lc.DEFAULT_RHO,
    "sigma_b_max": 5.0,
    "codeword": "random",
    "alist": "",
}

ISING_DEFAULTS = {
    "u": [0.0, 0.2, 0.4, 0.8],
    "test_instances": 100,
    "val_instances": 100,
    "iterations": 10,
    "damping_grid": list(ising.DAMPING_GRID),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- configuration ----------------------------------------------------------------

def _coerce(default, text, key):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(text)
            return low in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, (list, tuple)):
            return [float(t) for t in text.replace(",", " ").split()]
        return text.strip()
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {text!r}") from exc


def _train_defaults():
    return TrainConfig().to_dict()


def load_config(path):
    """Parse the INI file into ``{section: {key: raw string}}``; unknown keys are errors."""
    known = {"train": _train_defaults(), "eval": EVAL_DEFAULTS, "ising": ISING_DEFAULTS}
    if not path:
        return {}
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from exc
    out = {}
    for section in cp.sections():
        if section not in known:
            raise UsageError(f"unknown config section [{section}]")
        out[section] = {}
        for key, value in cp.items(section):
            if key not in known[section]:
                raise UsageError(f"unknown key {key!r} in [{section}]")
            out[section][key] = value
    return out


def resolve(section, raw, defaults, overrides=()):
    """Defaults, then config-file values, then ``key=value`` overrides."""
    vals = dict(defaults)
    items = list(raw.get(section, {}).items())
    for ov in overrides:
        if "=" not in ov:
            raise UsageError(f"override must be key=value, got {ov!r}")
        k, v = ov.split("=", 1)
        items.append((k.strip(), v))
    for k, v in items:
        if k not in defaults:
            raise UsageError(f"unknown key {k!r} for [{section}]")
        vals[k] = _coerce(defaults[k], v, k)
    return vals


def config_hash(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def _write_csv(path, columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    text = buf.getvalue()
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# -- commands ---------------------------------------------------------------------

def cmd_train(args, raw):
    base = TrainConfig.for_experiment(args.experiment or raw.get("train", {}).get("experiment", "ldpc"))
    defaults = base.to_dict()
    vals = resolve("train", raw, defaults, args.set)
    if args.experiment:
        vals["experiment"] = args.experiment
    if args.model:
        vals["model"] = args.model
    if args.seed is not None:
        vals["seed"] = args.seed
    cfg = TrainConfig(**vals)
    h = config_hash(cfg.to_dict())
    log.info("train seed=%d config_hash=%s", cfg.seed, h)
    if not args.out:
        raise UsageError("train needs --out PATH for the checkpoint")
    try:
        res = train(cfg, checkpoint=args.out, history_path=args.history)
    except NonFiniteLoss as exc:
        de.save_checkpoint(exc.best.params, args.out)
        log.error("%s; best checkpoint kept at %s", exc, args.out)
        return EXIT_RUNTIME
    log.info("done: %d steps (%s), best validation %.6g at step %d",
             res.steps, res.stop_reason, res.best_metric, res.best_step)
    return EXIT_OK


def _decoder_list(text):
    names = [d.strip() for d in text.split(",") if d.strip()]
    for d in names:
        if d not in DECODERS:
            raise UsageError(f"unknown decoder {d!r}; choose from {', '.join(DECODERS)}")
    return names


def _load_params(path):
    if not path:
        return None
    if not os.path.exists(path):
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    return de.load_checkpoint(path)


def _checkpoint_map(entries):
    """``--checkpoint`` values: ``PATH`` or ``NAME=PATH`` (NAME is a method or ``method@u``)."""
    out = {}
    for e in entries or ():
        if "=" in e:
            k, v = e.split("=", 1)
            out[k.strip()] = v
        else:
            out[""] = e
    return out


def _ber_rows(decoder_names, cells, ev, seed, h, ckpts):
    pcm = lc.load_alist(ev["alist"]) if ev["alist"] else lc.default_code()
    G = lc.generator_matrix(pcm)
    decoders = {}
    for name in decoder_names:
        params = None
        if name in LEARNED:
            path = ckpts.get(name, ckpts.get(""))
            if not path:
                raise MissingCheckpoint(f"decoder {name!r} needs --checkpoint {name}=PATH")
            params = _load_params(path)
        decoders[name] = make_decoder(name, pcm, params, iterations=None if name in LEARNED
                                      else int(ev["iterations"]),
                                      sigma_b_max=ev["sigma_b_max"], rho=ev["rho"])
    codewords = None if ev["codeword"] == "zeros" else (
        lambda count, rng: lc.random_codewords(G, count, rng))
    rows = []
    for snr, sb in cells:
        chan = lc.ChannelConfig(snr, rho=ev["rho"], sigma_b=sb, rate=pcm.rate)
        # same stream for every decoder in a cell: paired comparisons
        cell_seed = [seed, int(round(snr * 1000)), int(round(sb * 1000))]
        for name in decoder_names:
            res = lc.evaluate_ber(decoders[name], chan, pcm.n, seed=cell_seed,
                                  min_errors=ev["min_errors"], max_frames=ev["max_frames"],
                                  batch=ev["batch_frames"], codewords=codewords)
            log.info("snr %.1f sigma_b %.1f %-12s frames %d errors %d ber %.3e%s", snr, sb,
                     name, res.frames, res.bit_errors, res.ber, " (capped)" if res.capped else "")
            rows.append(dict(snr_db=snr, sigma_b=sb, decoder=name, frames=res.frames,
                             bit_errors=res.bit_errors, ber=res.ber, ci_low=res.ci_low,
                             ci_high=res.ci_high, capped=res.capped, seed=seed, config_hash=h))
    return rows


def cmd_eval_ber(args, raw, sweep=False):
    ev = resolve("eval", raw, EVAL_DEFAULTS, args.set)
    seed = 0 if args.seed is None else args.seed
    names = _decoder_list(args.decoders)
    if sweep:
        cells = [(ev["sweep_snr_db"], sb) for sb in ev["sigma_b"]]
    else:
        cells = [(s, sb) for s in ev["snr_db"] for sb in ev["sigma_b"]]
    ckpts = _checkpoint_map(args.checkpoint)
    h = config_hash(ev, names, sorted(ckpts.items()), _ckpt_digests(ckpts))
    log.info("%s seed=%d config_hash=%s", "sweep-sigma-b" if sweep else "eval-ber", seed, h)
    rows = _ber_rows(names, cells, ev, seed, h, ckpts)
    _write_csv(args.out, BER_COLUMNS, rows)
    return EXIT_OK


def _ckpt_digests(ckpts):
    out = {}
    for k, path in sorted(ckpts.items()):
        if path and os.path.isfile(path):
            with open(path, "rb") as fh:
                out[k] = hashlib.sha256(fh.read()).hexdigest()[:12]
    return out


def _ising_checkpoint(ckpts, method, u):
    for key in (f"{method}@{u:g}", method):
        if key in ckpts:
            return ckpts[key]
    d = ckpts.get("")
    if d and os.path.isdir(d):
        path = os.path.join(d, f"{method}_u{u:g}.ckpt")
        if os.path.exists(path):
            return path
    raise MissingCheckpoint(f"no checkpoint for {method} at u={u:g}; pass "
                            f"--checkpoint {method}@{u:g}=PATH or a directory")


def ising_rows(methods, cfg, seed, h, ckpts):
    rows = []
    for u in cfg["u"]:
        test = ising.make_instances(cfg["test_instances"], seed, u, stream=4)
        alpha = None
        for method in methods:
            if method == "bp":
                kl = ising.bp_kl(test, cfg["iterations"])
            elif method == "bp-damping":
                if alpha is None:
                    val = ising.make_instances(cfg["val_instances"], seed, u, stream=2)
                    grid = tuple(cfg["damping_grid"])
                    alpha, _ = ising.select_damping(val, grid, cfg["iterations"])
                kl = ising.bp_kl(test, cfg["iterations"], alpha)
            else:
                params = _load_params(_ising_checkpoint(ckpts, method, u))
                if model_config(params).kind != method:
                    raise MissingCheckpoint(f"checkpoint for {method} holds a "
                                            f"{model_config(params).kind!r} model")
                kl = np.array([ising.kl_marginals(inst.exact.marginals,
                                                  infer(inst.graph, params,
                                                        seed=np.random.default_rng([seed, k])).marginals)
                               for k, inst in enumerate(test)])
            log.info("u %.1f %-10s KL %.5f", u, method, kl.mean())
            rows.append(dict(u=u, method=method, kl_mean=float(kl.mean()), kl_std=float(kl.std()),
                             seed=seed, damping_alpha="" if method != "bp-damping" else alpha,
                             reference_kl=REFERENCE_KL.get(method, {}).get(round(u, 1), ""),
                             config_hash=h))
    return rows


def cmd_ising_table(args, raw):
    cfg = resolve("ising", raw, ISING_DEFAULTS, args.set)
    seed = 0 if args.seed is None else args.seed
    methods = [m.strip() for m in args.decoders.split(",") if m.strip()]
    for m in methods:
        if m not in ISING_METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(ISING_METHODS)}")
    ckpts = _checkpoint_map(args.checkpoint)
    h = config_hash(cfg, methods, sorted(ckpts.items()), _ckpt_digests(ckpts))
    log.info("ising-table seed=%d config_hash=%s", seed, h)
    _write_csv(args.out, ISING_COLUMNS, ising_rows(methods, cfg, seed, h, ckpts))
    return EXIT_OK


def cmd_gradcheck(args, raw):
    res = check_gradients(n_coords=args.coords, seed=0 if args.seed is None else args.seed)
    print(res.line())
    return EXIT_OK if res.passed else EXIT_CHECK


def cmd_selftest(args, raw):
    results = run_all(seed=0 if args.seed is None else args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


# -- entry point --------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="neuralbp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, decoders=None):
        sp.add_argument("--config", metavar="PATH", help="INI configuration file")
        sp.add_argument("--seed", type=int, metavar="U64", help="master seed (default 0)")
        sp.add_argument("--out", metavar="PATH", help="output file ('-' for stdout)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
        if decoders is not None:
            sp.add_argument("--decoders", default=decoders, metavar="LIST",
                            help=f"comma-separated list (default {decoders})")
            sp.add_argument("--checkpoint", action="append", metavar="PATH",
                            help="checkpoint file, NAME=PATH, or a directory (repeatable)")

    t = sub.add_parser("train", help="train an NEBP or FG-GNN model")
    common(t)
    t.add_argument("--experiment", choices=("ldpc", "ising"))
    t.add_argument("--model", choices=("nebp", "fg-gnn"))
    t.add_argument("--history", metavar="PATH", help="training history CSV")
    common(sub.add_parser("eval-ber", help="BER over the SNR x sigma_b grid"),
           "bits,ldpc-bp,ldpc-bursty")
    common(sub.add_parser("sweep-sigma-b", help="BER against sigma_b at a fixed SNR"),
           "bits,ldpc-bp,ldpc-bursty")
    common(sub.add_parser("ising-table", help="KL table for Ising models"),
           "bp,bp-damping,fg-gnn,nebp")
    g = sub.add_parser("gradcheck", help="finite-difference check of the NEBP loss")
    g.add_argument("--seed", type=int, metavar="U64")
    g.add_argument("--coords", type=int, default=200)
    s = sub.add_parser("selftest", help="run the built-in property checks")
    s.add_argument("--seed", type=int, metavar="U64")
    return p


COMMANDS = {
    "train": cmd_train,
    "eval-ber": cmd_eval_ber,
    "sweep-sigma-b": lambda a, r: cmd_eval_ber(a, r, sweep=True),
    "ising-table": cmd_ising_table,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"neuralbp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise UsageError("seed must be an unsigned 64-bit integer")
        raw = load_config(getattr(args, "config", None))
        return COMMANDS[args.command](args, raw)
    except (UsageError, MissingCheckpoint) as exc:
        print(f"neuralbp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"neuralbp: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
