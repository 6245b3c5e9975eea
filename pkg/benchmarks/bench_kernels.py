"""Compiled kernels vs the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--end-to-end]

Each kernel is timed on shapes the desk-scale models actually use. With
``--end-to-end`` a short codec training run is timed once per backend in a
subprocess (the backend is picked at import time).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from adrf.kernels import available_backends


def _cases(rng):
    B, H = 32, 64
    z = rng.normal(size=(B, 4 * H))
    c_prev = rng.normal(size=(B, H))
    x = rng.normal(size=(32, 16, 16, 16))
    n = 200_000
    adam = (np.zeros(n), np.zeros(n), rng.normal(size=n), np.empty(n))

    def gates_bwd(mod):
        h, c, act, tc = mod.lstm_gates_forward(z, c_prev)
        return lambda: mod.lstm_gates_backward(h, c, act, tc, c_prev)

    def col2im(mod):
        cols = mod.im2col(x, 3, 2, 1)
        return lambda: mod.col2im(cols, 16, 16, 16, 3, 2, 1)

    return {
        f"lstm_gates_forward B={B} H={H}": lambda mod: (lambda: mod.lstm_gates_forward(z, c_prev)),
        f"lstm_gates_backward B={B} H={H}": gates_bwd,
        "im2col 32x16x16x16 k3 s2": lambda mod: (lambda: mod.im2col(x, 3, 2, 1)),
        "col2im 32x16x16x16 k3 s2": col2im,
        f"adam_update n={n}": lambda mod: (lambda: mod.adam_update(*adam, 1e-3, 0.9, 0.999, 1e-7, 0.1, 0.001)),
    }


_E2E = """
import time, numpy as np
from adrf import kernels, vision
frames = np.random.default_rng(0).uniform(-1, 1, size=(64, 32, 32))
t = time.perf_counter()
vision.pretrain_codec(frames, epochs=2, batch=16, augment=False, seed=0)
print(kernels.BACKEND, time.perf_counter() - t)
"""


def end_to_end():
    out = {}
    for pure in ("1", "0"):
        env = dict(os.environ, ADRF_PURE_PYTHON=pure)
        r = subprocess.run([sys.executable, "-c", _E2E], env=env, capture_output=True, text=True, check=True)
        name, seconds = r.stdout.split()
        out[name] = float(seconds)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args(argv)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; run `python setup.py build_ext --inplace`", file=sys.stderr)
    names = sorted(backends, reverse=True)
    print(f"{'kernel':<34}" + "".join(f"{n + ' ms':>12}" for n in names) + f"{'speedup':>10}")
    rng = np.random.default_rng(0)
    for label, make in _cases(rng).items():
        ms = {}
        for n in names:
            fn = make(backends[n])
            number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
            ms[n] = 1e3 * min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
        speed = f"{ms['python'] / ms['cython']:.2f}x" if "cython" in ms else "-"
        print(f"{label:<34}" + "".join(f"{ms[n]:>12.3f}" for n in names) + f"{speed:>10}")
    if args.end_to_end:
        e2e = end_to_end()
        print("\ncodec pretraining, 2 epochs on 64 frames of 32x32:")
        for n, s in sorted(e2e.items(), reverse=True):
            print(f"  {n:<8} {s:8.2f} s")


if __name__ == "__main__":
    main()
