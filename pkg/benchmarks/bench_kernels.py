"""Time each kernel under the compiled and the numpy backend.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints the best-of-``repeat`` time per call and the speedup of the compiled
backend. Also runs a short end-to-end training loop under each backend.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from clapaug.kernels import backends


def cases(rng):
    C = rng.normal(size=(32, 32))
    table = rng.normal(size=(32768, 64))
    ids = rng.integers(0, 32768, size=32 * 12).astype(np.int64)
    offsets = np.arange(0, ids.size + 1, 12, dtype=np.int64)
    grad_out = rng.normal(size=(32, 64))
    p = rng.normal(size=(128, 128))
    g = rng.normal(size=p.shape)
    m, v = np.zeros_like(p), np.zeros_like(p)
    S = rng.normal(size=(320, 320))
    scores = rng.normal(size=(400, 8))
    rel = (rng.random((400, 8)) < 0.2).astype(np.int8)
    caption = b"a dog barks loudly while rain hits a metal roof"
    grad_table = np.zeros_like(table)
    return {
        "fnv1a64": lambda k: k.fnv1a64(caption),
        "contrastive_loss_grad 32x32": lambda k: k.contrastive_loss_grad(C),
        "embedding_bag_forward": lambda k: k.embedding_bag_forward(table, ids, offsets),
        "embedding_bag_backward": lambda k: k.embedding_bag_backward(grad_table, grad_out, ids, offsets),
        "adam_update 128x128": lambda k: k.adam_update(p, g, m, v, 5e-4, 0.9, 0.999, 1e-8, 0.1, 0.001),
        "diagonal_ranks 320x320": lambda k: k.diagonal_ranks(S),
        "average_precision 400x8": lambda k: k.average_precision(scores, rel),
    }


TRAIN_SNIPPET = """
import time
from clapaug.config import load_config
from clapaug.kernels import BACKEND
from clapaug.sweep import train_toy
t0 = time.perf_counter()
train_toy(0, load_config(None, {"train.steps": 100}))
print(BACKEND, time.perf_counter() - t0)
"""


def train_timing(pure: bool) -> tuple[str, float]:
    env = dict(os.environ, CLAPAUG_PURE="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True, text=True,
                         check=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-train", action="store_true")
    args = ap.parse_args(argv)

    found = backends()
    if "cython" not in found:
        print("compiled backend not built; run `python3 setup.py build_ext --inplace`")
    bench = cases(np.random.default_rng(0))
    names = list(found)
    print(f"{'kernel':<30}" + "".join(f"{n + ' (us)':>16}" for n in names) + f"{'speedup':>10}")
    for label, fn in bench.items():
        times = {}
        for name, mod in found.items():
            number = 200 if label.startswith(("fnv", "contrastive", "adam")) else 20
            t = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number
            times[name] = t * 1e6
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{label:<30}" + "".join(f"{times[n]:>16.1f}" for n in names) + f"{speed:>9.2f}x")

    if not args.skip_train:
        print("\n100 toy training steps:")
        for pure in (False, True):
            backend, secs = train_timing(pure)
            print(f"  {backend:<8} {secs:.2f}s")


if __name__ == "__main__":
    main()
