"""Compiled versus numpy kernel timings.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the median time of each backend and the speedup,
then times a short end-to-end training run under both backends.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from flgap import _kernels_py

try:
    from flgap import _kernels as compiled
except ImportError:  # pragma: no cover
    sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")


def cases(rng):
    n = 400 * 400
    for dt in (np.float32, np.float64):
        p, g, m = (rng.standard_normal(n).astype(dt) for _ in range(3))
        v = np.abs(rng.standard_normal(n)).astype(dt)
        hyper = (1e-3, 0.9, 0.999, 1e-8, 0.1, 0.01, 0.5, 0.0, 1e-6)
        yield (f"adam_step {dt.__name__} n={n}",
               lambda k, a=(p, g, m, v): k.adam_step(*a, *hyper))
        h = rng.standard_normal((64, 400)).astype(dt)
        d = rng.standard_normal((64, 400)).astype(dt)
        yield (f"relu_mask {dt.__name__} 64x400", lambda k, d=d, h=h: k.relu_mask(d, h))
    a, b = rng.standard_normal((2, 256, 256))
    out = np.zeros((256, 256))
    yield "hadamard_accumulate 256x256", lambda k: k.hadamard_accumulate(out, a, b, 1.0)


TRAIN = (
    "import time\n"
    "from flgap import _accel, datasets as ds, network as nw, training as tr\n"
    "train = ds.gen_msp(ds.MspSpec(), 1024, 0)\n"
    "s = nw.init(nw.NetworkConfig(30, 400, 5), 0)\n"
    "t = time.perf_counter()\n"
    "tr.train(s, train, tr.TrainConfig(epochs=1, batch_size=64, dtype='float32'), max_steps=16)\n"
    "print(_accel.BACKEND, time.perf_counter() - t)\n"
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'cython (us)':>12s} {'numpy (us)':>12s} {'speedup':>8s}")
    for name, fn in cases(rng):
        times = {}
        for label, mod in (("cython", compiled), ("numpy", _kernels_py)):
            t = timeit.repeat(lambda: fn(mod), number=20, repeat=args.repeat)
            times[label] = 1e6 * float(np.median(t)) / 20
        print(f"{name:36s} {times['cython']:12.1f} {times['numpy']:12.1f} "
              f"{times['numpy'] / times['cython']:8.2f}")
    print("\n16 training steps, width 400, depth 5, batch 64:")
    for flag in ("0", "1"):
        env = dict(os.environ, FLGAP_PURE_PYTHON=flag)
        out = subprocess.run([sys.executable, "-c", TRAIN], env=env, capture_output=True, text=True,
                             check=True).stdout.split()
        print(f"  {out[0]:8s} {float(out[1]):.3f} s")


if __name__ == "__main__":
    main()
