"""Time the numba kernels against their numpy fallbacks and check they agree.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Run with PARETORL_NUMBA=0 to see that the library itself never touches numba;
the script still times both paths whenever numba is importable.
"""

import argparse
import time

import numpy as np

from paretorl import _kernels as K


def _time(fn, repeat):
    fn()  # warm-up (and JIT compile)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng):
    r24 = rng.normal(size=(24, 3))
    r256 = rng.normal(size=(256, 3))
    pts = rng.random((200, 3))
    front = pts[K.nondominated_mask(pts, backend="numpy")]
    stream = rng.normal(size=(24, 24))
    lengths = rng.integers(1, 25, 24)
    n = 250_000
    p, g = rng.normal(size=n).astype(np.float32), rng.normal(size=n).astype(np.float32)
    idx = rng.integers(0, 34, 24 * 24)
    rows = rng.normal(size=(idx.size, 64)).astype(np.float32)

    def adamw(backend):
        pp, m, v = p.copy(), np.zeros(n, np.float32), np.zeros(n, np.float32)
        K.adamw_update(pp, g, m, v, 1e-3, 0.9, 0.99, 1e-8, 0.01, 1, backend=backend)
        return pp

    def scatter(backend):
        out = np.zeros((34, 64), np.float32)
        K.scatter_rows(out, idx, rows, backend=backend)
        return out

    return {
        "nondominated 24x3": lambda b: K.nondominated_mask(r24, backend=b),
        "nondominated 256x3": lambda b: K.nondominated_mask(r256, backend=b),
        "hypervolume 200x3": lambda b: K.hypervolume_sweep(front, np.zeros(3), backend=b),
        "tail sums 24x24": lambda b: K.discounted_tail_sums(stream, lengths, 0.99, backend=b),
        "scatter rows 576x64": scatter,
        "adamw 250k": adamw,
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        print("numba unavailable or disabled; timing the numpy path only")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  agree")
    for name, fn in cases(rng).items():
        t_np = _time(lambda: fn("numpy"), args.repeat)
        if not K.HAVE_NUMBA:
            print(f"{name:24s} {t_np * 1e3:10.3f}")
            continue
        t_nb = _time(lambda: fn("numba"), args.repeat)
        same = np.allclose(np.asarray(fn("numpy"), float), np.asarray(fn("numba"), float), rtol=1e-6, atol=1e-9)
        print(f"{name:24s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.1f}x  {same}")


if __name__ == "__main__":
    main()
