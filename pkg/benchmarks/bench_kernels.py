"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeats N]

Each row is one kernel at a shape taken from the default network; the
last row is a full training step on a 32x32 pair.  Times are the best
of N runs in milliseconds.
"""

import argparse
import time

import numpy as np

from cafcn import kernels


def best_ms(fn, repeats):
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def kernel_cases(rng):
    x = rng.standard_normal((32, 32, 16))
    w = rng.standard_normal((3, 3, 16, 32))
    b = np.zeros(32)
    g = rng.standard_normal((32, 32, 32))
    gp = rng.standard_normal((16, 16, 16))
    _, idx = kernels.python_backend.maxpool2_forward(x)
    return {
        "conv2d_forward 32x32x16->32": lambda m: m.conv2d_forward(x, w, b, 1, 1),
        "conv2d_grad_input": lambda m: m.conv2d_grad_input(g, w, 1, 1, 32, 32),
        "conv2d_grad_weight": lambda m: m.conv2d_grad_weight(x, g, 3, 3, 1, 1),
        "maxpool2_forward": lambda m: m.maxpool2_forward(x),
        "maxpool2_backward": lambda m: m.maxpool2_backward(gp, idx),
    }


def train_step(module):
    # rebind the dispatch table so the network code runs on `module`
    from cafcn.data import SyntheticSpec, generate_pair
    from cafcn.network import NetworkConfig, NetworkParams, forward_backward_pair

    names = ("conv2d_forward", "conv2d_grad_input", "conv2d_grad_weight",
             "maxpool2_forward", "maxpool2_backward")
    saved = {n: getattr(kernels, n) for n in names}
    sample = generate_pair(SyntheticSpec(seed=0)).as_tuple()
    params = NetworkParams.init(NetworkConfig(), seed=0)

    def run():
        for n in names:
            setattr(kernels, n, getattr(module, n))
        try:
            forward_backward_pair(*sample, params)
        finally:
            for n, f in saved.items():
                setattr(kernels, n, f)
    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    backends = kernels.available_backends()
    if len(backends) < 2:
        print("compiled extension not built; timing the python backend only")
    header = f"{'case':32s}" + "".join(f"{m.BACKEND:>12s}" for m in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10s}"
    print(header)

    rng = np.random.default_rng(0)
    rows = [(name, [best_ms(lambda m=m, f=f: f(m), args.repeats) for m in backends])
            for name, f in kernel_cases(rng).items()]
    rows.append(("train step (pair, 32x32)", [best_ms(train_step(m), args.repeats) for m in backends]))
    for name, times in rows:
        line = f"{name:32s}" + "".join(f"{t:12.3f}" for t in times)
        if len(times) == 2:
            line += f"{times[1] / times[0]:9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
