"""Compiled (numba) vs pure-numpy kernel timings.

    python benchmarks/bench_kernels.py [--repeat N]

Both paths are called directly through ``hla._kernels.implementations`` so a
single process measures them side by side, whatever ``HLA_NUMBA`` says.
"""

import argparse
import os
import time

import numpy as np

from hla import _kernels as K


def best_of(fn, args, repeat):
    fn(*args)  # warm-up (triggers compilation)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    x = rng.standard_normal((256, 784))
    w = rng.standard_normal((784, 256))
    d = rng.standard_normal((256, 256))
    signs = rng.integers(-1, 2, 784 * 256).astype(np.int8)
    codes = K.np_pack_codes(signs)
    alphas = rng.uniform(0.05, 0.1, 256)
    blob = os.urandom(1 << 16)
    return [
        ("matmul 256x784 @ 784x256", "matmul", (x, w)),
        ("matmul_tn 784x256^T @ 256x256", "matmul_tn", (x, d)),
        ("packed_matmul 256x784 -> 256", "packed_matmul", (codes, alphas, 784, 256, x)),
        ("pack_codes 200704 signs", "pack_codes", (signs,)),
        ("crc32c 64 KiB", "crc32c", (blob,)),
    ]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'equal':>6s}")
    for label, name, call_args in cases(rng):
        impls = K.implementations(name)
        t_np = best_of(impls["numpy"], call_args, args.repeat)
        if "numba" not in impls:
            print(f"{label:34s} {t_np * 1e3:10.2f} {'n/a':>10s}")
            continue
        t_nb = best_of(impls["numba"], call_args, args.repeat)
        a, b = impls["numpy"](*call_args), impls["numba"](*call_args)
        equal = all(np.array_equal(u, v) for u, v in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        print(f"{label:34s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:7.1f}x {str(bool(equal)):>6s}")


if __name__ == "__main__":
    main()
