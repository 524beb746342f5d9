"""Numba vs pure-numpy timings for the hot kernels.

Shapes mirror one SmallCNN training step (batch 32, 8x8 Bars images).
Both paths are called directly, so the LIERA_LAB_NUMBA flag does not matter
here; ``--end-to-end`` additionally runs a short fine-tune under each flag
value in a subprocess.

    python benchmarks/bench_kernels.py [--repeat 7] [--end-to-end]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from liera_lab import kernels
from liera_lab.rng import Rng


def cases(rng):
    x1 = rng.normal(32 * 64).reshape(32, 1, 8, 8)
    x2 = rng.normal(32 * 8 * 64).reshape(32, 8, 8, 8)
    cols2 = kernels.im2col_numpy(x2, 3, 1, 1, 8, 8)
    w2 = rng.normal(8 * 72).reshape(8, 72)
    head_x = rng.normal(32 * 512).reshape(32, 512)
    head_w = rng.normal(512 * 4).reshape(512, 4)
    svd_in = rng.normal(64).reshape(8, 8)
    return [
        ("im2col conv1", "im2col", (x1, 3, 1, 1, 8, 8)),
        ("im2col conv2", "im2col", (x2, 3, 1, 1, 8, 8)),
        ("matmul conv2 (8x72 @ 72x2048)", "matmul", (w2, cols2)),
        ("matmul head (32x512 @ 512x4)", "matmul", (head_x, head_w)),
        ("col2im conv2", "col2im", (cols2, 32, 8, 8, 8, 3, 1, 1, 8, 8)),
        ("jacobi 8x8", "jacobi_sweeps", (svd_in, 1e-14, 60)),
        ("column norms 8x8", "column_norms", (svd_in,)),
    ]


def time_call(fn, args, repeat, copy_first):
    def call():
        fn(*((args[0].copy(),) + args[1:]) if copy_first else args)

    call()  # compile / warm caches
    loops, _ = timeit.Timer(call).autorange()
    return min(timeit.repeat(call, number=loops, repeat=repeat)) / loops


def kernel_table(repeat):
    rng = Rng(0)
    print(f"{'kernel':34s} {'numba us':>10s} {'numpy us':>10s} {'speedup':>8s}  identical")
    for label, name, args in cases(rng):
        fast, slow = getattr(kernels, f"{name}_numba"), getattr(kernels, f"{name}_numpy")
        in_place = name == "jacobi_sweeps"
        same = np.array_equal(
            fast(*((args[0].copy(),) + args[1:])) if not in_place else _jacobi(fast, args),
            slow(*((args[0].copy(),) + args[1:])) if not in_place else _jacobi(slow, args),
        )
        t_fast = time_call(fast, args, repeat, in_place) * 1e6
        t_slow = time_call(slow, args, repeat, in_place) * 1e6
        print(f"{label:34s} {t_fast:10.1f} {t_slow:10.1f} {t_slow / t_fast:8.1f}x  {same}")


def _jacobi(fn, args):
    u = args[0].copy()
    fn(u, *args[1:])
    return u


SNIPPET = """
import time
from liera_lab import data, nn, optim, train, peft
task = data.TaskSpec().with_transforms(data.shift(2, 1), data.noise(0.1))
tr, va = data.generate(task)
model = nn.smallcnn(4, 0)
t0 = time.perf_counter()
train.finetune(model, tr, va, peft.AdapterConfig(target=("conv*", "linear*")), optim.AdamWConfig(), 3, 32, 0)
print((time.perf_counter() - t0) * 1000.0)
"""


def end_to_end():
    print("\n3-epoch SmallCNN fine-tune (lie_taylor), first call includes JIT compile/cache load")
    for flag in ("1", "0"):
        env = dict(os.environ, LIERA_LAB_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", SNIPPET], env=env, capture_output=True, text=True, check=True)
        print(f"  LIERA_LAB_NUMBA={flag}: {float(out.stdout):9.1f} ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=7)
    parser.add_argument("--end-to-end", action="store_true")
    args = parser.parse_args()
    kernel_table(args.repeat)
    if args.end_to_end:
        end_to_end()


if __name__ == "__main__":
    main()
