"""Time the compiled and pure-Python convolution/pooling kernels side by side.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the best-of-N time for each backend, the
speedup, and the largest absolute difference between the two outputs.
"""

import argparse
import timeit

import numpy as np

from forgetd import kernels

CASES = {
    # MNIST-sized batch through the first ConvNet layer
    "conv2d_forward": lambda x, w, b: kernels.conv2d_forward(x, w, b, 1),
    "conv2d_backward": lambda x, w, b: kernels.conv2d_backward(x, w, np.ones((x.shape[0], 8, 24, 24)), 1),
    "maxpool2d_forward": lambda x, w, b: kernels.maxpool2d_forward(x, 2),
}


def run_case(fn, args, repeat):
    t = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))
    return t, fn(*args)


def flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(o).astype(np.float64) for o in out])
    return np.ravel(out)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(args.batch, 1, 28, 28))
    w = rng.normal(size=(8, 1, 5, 5))
    b = rng.normal(size=8)
    if "compiled" not in kernels.BACKENDS:
        print("compiled extension not built; timing the python backend only")
    print(f"{'kernel':<20}" + "".join(f"{n + ' (ms)':>16}" for n in kernels.BACKENDS) + f"{'speedup':>10}{'max diff':>12}")
    start = kernels.BACKEND
    try:
        for name, fn in CASES.items():
            times, outs = [], []
            for backend in kernels.BACKENDS:
                kernels.use_backend(backend)
                t, out = run_case(fn, (x, w, b), args.repeat)
                times.append(t)
                outs.append(flat(out))
            row = f"{name:<20}" + "".join(f"{1e3 * t:16.2f}" for t in times)
            if len(times) == 2:
                row += f"{times[1] / times[0]:9.1f}x{np.max(np.abs(outs[0] - outs[1])):12.1e}"
            print(row)
    finally:
        kernels.use_backend(start)


if __name__ == "__main__":
    main()
