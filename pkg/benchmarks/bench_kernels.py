"""Time the numba kernels against their pure-numpy/python fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--rows 20000]

The fallbacks are what runs with MVDIAG_DISABLE_NUMBA=1.
"""

import argparse
import time

import numpy as np

from mvdiag import backend, embedding, iforest
from mvdiag.iforest import IsolationForest


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_build(X, repeat):
    psi = 256
    limit = 8
    rng = np.random.default_rng(0)
    idx = rng.choice(X.shape[0], psi, replace=False).astype(np.int64)
    u = rng.random((2, 2 * psi + 1))
    bufs = lambda: (np.empty(2 * psi + 1, np.int64), np.empty(2 * psi + 1),  # noqa: E731
                    np.empty(2 * psi + 1, np.int64), np.empty(2 * psi + 1, np.int64))
    kernel = iforest._build_tree
    py = getattr(kernel, "py_func", kernel)

    def run(fn):
        def go():
            for _ in range(100):
                fn(X, idx.copy(), limit, u[0], u[1], *bufs())
        return go

    kernel(X, idx.copy(), limit, u[0], u[1], *bufs())  # compile
    return best_of(run(kernel), repeat), best_of(run(py), repeat)


def bench_score(X, repeat):
    f = IsolationForest().fit(X, np.random.default_rng(1))
    args = (X, f.feat, f.thr, f.left, f.size, f.offsets)
    iforest._mean_path_kernel(*args)
    return (best_of(lambda: iforest._mean_path_kernel(*args), repeat),
            best_of(lambda: iforest._mean_path_numpy(*args), repeat))


def bench_sgns(n_pairs, repeat):
    rng = np.random.default_rng(2)
    vocab, d = 500, 128
    w_in = rng.normal(size=(vocab, d)) * 0.01
    w_out = np.zeros((vocab, d))
    c = rng.integers(0, vocab, n_pairs)
    ctx = rng.integers(0, vocab, n_pairs)
    negs = rng.integers(0, vocab, (n_pairs, 5))
    lrs = np.full(n_pairs, 0.025)
    embedding._sgns_kernel(w_in.copy(), w_out.copy(), c[:10], ctx[:10], negs[:10], lrs[:10])
    return (best_of(lambda: embedding._sgns_kernel(w_in.copy(), w_out.copy(), c, ctx, negs, lrs), repeat),
            best_of(lambda: embedding._sgns_numpy(w_in.copy(), w_out.copy(), c, ctx, negs, lrs), repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--rows", type=int, default=20_000)
    ap.add_argument("--pairs", type=int, default=20_000)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    X = np.column_stack([rng.lognormal(4.0, 0.3, args.rows), (rng.random(args.rows) > 0.01).astype(float)])
    print(f"active backend: {backend()}")
    if backend() != "numba":
        print("numba disabled; both columns time the fallback")
    rows = [
        ("iforest build (100 trees, psi=256)", bench_build(X, args.repeat)),
        (f"iforest score ({args.rows} rows x 100 trees)", bench_score(X, args.repeat)),
        (f"sgns pass ({args.pairs} pairs, d=128, 5 neg)", bench_sgns(args.pairs, args.repeat)),
    ]
    print(f"{'kernel':<44}{'numba s':>10}{'fallback s':>12}{'speedup':>9}")
    for name, (fast, slow) in rows:
        print(f"{name:<44}{fast:>10.4f}{slow:>12.4f}{slow / fast:>8.1f}x")


if __name__ == "__main__":
    main()
