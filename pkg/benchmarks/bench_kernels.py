"""Compare the numba and pure-numpy kernel paths.

    python3 benchmarks/bench_kernels.py            # kernel timings
    python3 benchmarks/bench_kernels.py --e2e      # plus one training run per backend

Kernel timings call the ``*_numba`` and ``*_numpy`` functions directly, so a
single process covers both.  The end-to-end run starts a subprocess per
backend with ``OPENDX_NUMBA`` set, which is how users select the path.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from opendx import _kernels as K


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def random_csr(rng, n_rows, n_features, per_row=(7, 11)):
    counts = rng.integers(per_row[0], per_row[1] + 1, n_rows)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    indices = np.concatenate(
        [np.sort(rng.choice(n_features, c, replace=False)) for c in counts]).astype(np.int64)
    return indptr, indices


def cases(args):
    rng = np.random.default_rng(0)
    d, h = args.features, args.hidden
    indptr, indices = random_csr(rng, args.batch, d)
    w = rng.normal(size=(d, h))
    b = rng.normal(size=h)
    delta = rng.normal(size=(args.batch, h))
    g = rng.normal(size=(d, h))
    a = rng.normal(size=(args.jacobi_n, args.jacobi_n))
    a = a @ a.T

    def adam(fn):
        p, m, v = w.copy(), np.zeros_like(w), np.zeros_like(w)
        return lambda: fn(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)

    yield (f"csr_affine  batch={args.batch} D={d} H={h}",
           lambda: K.csr_affine_numba(indptr, indices, w, b),
           lambda: K.csr_affine_numpy(indptr, indices, w, b))
    yield (f"csr_grad    batch={args.batch} D={d} H={h}",
           lambda: K.csr_grad_numba(indptr, indices, delta, d),
           lambda: K.csr_grad_numpy(indptr, indices, delta, d))
    yield (f"adam_update {d}x{h}", adam(K.adam_update_numba), adam(K.adam_update_numpy))
    yield (f"jacobi      n={args.jacobi_n}",
           lambda: K.jacobi_numba(a, 1e-10 * np.linalg.norm(a), 100),
           lambda: K.jacobi_numpy(a, 1e-10 * np.linalg.norm(a), 100))


E2E = """
import time
from opendx import backend
from opendx.kbmodel import KbConfig, generate_synthetic_kb
from opendx.casesim import simulate_dataset
from opendx.openset import init_model, train, TrainConfig, CE
kb = generate_synthetic_kb(KbConfig(n_diseases=120, n_very_common=60, seed=1))
tr = simulate_dataset(kb, range(60), 100, 1)
va = simulate_dataset(kb, range(60), 20, 1, start_index=100)
m = init_model(kb.n_findings, range(60), CE, 100, 0)
train(m, tr, va, TrainConfig(max_epochs=1, patience=1))   # warm-up / compile
t = time.perf_counter()
train(m, tr, va, TrainConfig(max_epochs=5, patience=5))
print(backend(), time.perf_counter() - t)
"""


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--features", type=int, default=2052)
    ap.add_argument("--hidden", type=int, default=100)
    ap.add_argument("--jacobi-n", type=int, default=120)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--e2e", action="store_true", help="also time 5 training epochs per backend")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    print(f"{'kernel':<40} {'numba [ms]':>12} {'numpy [ms]':>12} {'speed-up':>9}")
    for name, fast, slow in cases(args):
        fast()  # compile
        tf = best_of(fast, args.repeat)
        ts = best_of(slow, max(1, args.repeat if "jacobi" not in name else 1))
        print(f"{name:<40} {1e3 * tf:>12.3f} {1e3 * ts:>12.3f} {ts / tf:>8.1f}x")

    if args.e2e:
        print("\n5 training epochs, 6000 cases, D=2052, H=100:")
        for flag in ("1", "0"):
            env = dict(os.environ, OPENDX_NUMBA=flag)
            out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True,
                                 text=True, check=True).stdout.split()
            print(f"  {out[0]:<6} {float(out[1]):8.2f} s")


if __name__ == "__main__":
    main()
