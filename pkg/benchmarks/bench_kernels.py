"""Compare the compiled and numpy kernel backends.

Times each message-passing kernel and a full 20-iteration BP decode on a
batch of LDPC codeword graphs, once per backend, and checks that both
backends return identical results.

    python benchmarks/bench_kernels.py [--copies 64] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from neuralbp import kernels
from neuralbp import ldpc_channel as lc
from neuralbp.sum_product import run_bp


def workloads(copies, rng):
    pcm = lc.default_code()
    r = 1.0 + rng.normal(0, 0.8, size=(copies, pcm.n))
    g = lc.build_ldpc_factor_graph(pcm, lc.channel_priors(r, 0.8))
    E = g.num_edges
    msgs = rng.dirichlet([1, 1], size=E)
    init = rng.dirichlet([1, 1], size=g.num_variables)
    p1 = rng.random(E)
    seg_f = g.parity_segments
    return {
        "loo_product": lambda: kernels.loo_product(msgs, g.by_variable, init),
        "segment_product": lambda: kernels.segment_product(msgs, g.by_variable, init),
        "parity_loo": lambda: kernels.parity_loo(p1, seg_f, np.empty(E)),
        "segment_sum": lambda: kernels.segment_sum(msgs, g.by_factor),
        "run_bp x20": lambda: run_bp(g, 20)[1],
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--copies", type=int, default=64, help="codewords per graph")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = ["numpy"]
    try:
        kernels.use_backend("cython")
        backends.insert(0, "cython")
    except ImportError:
        print("compiled extension not built; timing the numpy backend only")
    start = kernels.BACKEND

    timings, outputs = {}, {}
    for name in backends:
        kernels.use_backend(name)
        jobs = workloads(args.copies, np.random.default_rng(0))
        for job, fn in jobs.items():
            t = timeit.Timer(fn)
            n, _ = t.autorange()
            best = min(t.repeat(args.repeat, n)) / n
            timings[name, job] = best
            outputs[name, job] = np.asarray(fn())
    kernels.use_backend(start)

    print(f"{args.copies} codewords of the bundled (96, 48) code, best of {args.repeat}")
    head = f"{'kernel':<16}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        head += f"{'speedup':>10}{'identical':>11}"
    print(head)
    for job in workloads(1, np.random.default_rng(0)):
        line = f"{job:<16}" + "".join(f"{timings[b, job] * 1e3:>10.3f}ms" for b in backends)
        if len(backends) == 2:
            same = np.array_equal(outputs["cython", job], outputs["numpy", job])
            line += f"{timings['numpy', job] / timings['cython', job]:>9.1f}x{str(same):>11}"
        print(line)


if __name__ == "__main__":
    main()
