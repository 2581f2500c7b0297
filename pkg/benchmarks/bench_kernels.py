"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py            # kernel micro-benchmarks
    python3 benchmarks/bench_kernels.py --e2e      # also a classifier epoch per path

Kernel timings call both implementations in one process. The end-to-end
timing runs a subprocess per path, with DRRG_DISABLE_NUMBA set for the numpy one.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from drrg.numerics import _kernels as K

E2E = """
import time
from drrg.cam import TrainConfig, train_classifier
from drrg.corpus import generate_corpus
corpus = generate_corpus(0, 64)
train_classifier(corpus[:8], TrainConfig(epochs=1))  # warm-up / compile
t = time.perf_counter()
train_classifier(corpus, TrainConfig(epochs=1))
print(time.perf_counter() - t)
"""


def cases(rng):
    x = rng.normal(size=(8, 16, 32, 32))
    cols, oh, ow = K.im2col_numpy(x, 3, 3, 2, 1)
    w = rng.random((8, 60, 100))
    ids = rng.integers(0, 500, size=(8, 100))
    v = rng.random((8, 60, 500))
    a = rng.integers(0, 30, size=60)
    b = rng.integers(0, 30, size=60)
    yield "im2col (8,16,32,32) s2", lambda: K.im2col_numpy(x, 3, 3, 2, 1), lambda: K.im2col(x, 3, 3, 2, 1)
    yield ("col2im (8,16,32,32) s2", lambda: K.col2im_numpy(cols, x.shape, 3, 3, 2, 1, oh, ow),
           lambda: K.col2im(cols, x.shape, 3, 3, 2, 1, oh, ow))
    yield "scatter_last (8,60,100)->500", lambda: K.scatter_last_numpy(w, ids, 500), lambda: K.scatter_last(w, ids, 500)
    yield "gather_last (8,60,500)", lambda: K.gather_last_numpy(v, ids), lambda: K.gather_last(v, ids)
    yield "lcs 60x60", lambda: K.lcs_length_numpy(a, b), lambda: K.lcs_length(a, b)


def best_of(fn, repeat=5):
    fn()  # first call compiles
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def e2e(disable: bool) -> float:
    env = dict(os.environ, DRRG_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--e2e", action="store_true", help="also time one classifier epoch on each path")
    args = parser.parse_args()
    if not K.HAVE_NUMBA:
        print("numba unavailable or disabled: both columns time the numpy path")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s}")
    for name, slow, fast in cases(rng):
        t_np, t_nb = best_of(slow), best_of(fast)
        print(f"{name:32s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.1f}x")
    if args.e2e:
        t_np, t_nb = e2e(True), e2e(False)
        print(f"{'classifier epoch, 64 images':32s} {t_np * 1e3:10.1f} {t_nb * 1e3:10.1f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
