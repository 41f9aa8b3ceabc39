"""Compare the compiled and reference kernel backends.

Times the four hot kernels and one full relaxation on a desk-scale
network, numba against numpy, after a warmup pass so compilation cost
does not pollute the numbers.  Run directly:

    python3 benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from epconv import kernels
from epconv.config import (DynamicsConfig, LayerSpec, NetworkConfig,
                           PoolingSpec, SpikingConfig)
from epconv.dynamics import NeuronState, init_parameters, relax
from epconv.seeding import substream


def timeit(fn, repeats):
    fn()  # warmup: triggers compilation on the numba path
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(rng):
    x = rng.standard_normal((32, 16, 28, 28)).astype(np.float32)
    w = rng.standard_normal((32, 16, 3, 3)).astype(np.float32)
    g = rng.standard_normal((32, 32, 28, 28)).astype(np.float32)
    pooled, idx = None, None

    def conv():
        kernels.conv2d(x, w, padding=1)

    def conv_t():
        kernels.conv2d_transpose(g, w, 1, 1, (28, 28))

    def pool():
        nonlocal pooled, idx
        pooled, idx = kernels.maxpool(g, 2)

    pool()

    def unpool():
        kernels.maxunpool(pooled, idx, 2)

    return [("conv2d 32x16x28x28 k3", conv),
            ("conv2d_transpose same", conv_t),
            ("maxpool f2", pool),
            ("max_unpool f2", unpool)]


def relax_case(rng):
    net = NetworkConfig(
        input_shape=(1, 28, 28),
        layers=(
            LayerSpec(kind="conv", channels=16, kernel=3, padding=1,
                      pooling=PoolingSpec(kind="max", size=2)),
            LayerSpec(kind="conv", channels=32, kernel=3, padding=0,
                      pooling=PoolingSpec(kind="max", size=2)),
            LayerSpec(kind="linear", features=128),
            LayerSpec(kind="linear", features=10),
        ),
    )
    geo = net.resolve()
    params = init_parameters(geo, substream(0, "bench"))
    dcfg = DynamicsConfig(step_size=0.9, t_free=50, t_nudge=10, strict=False)
    scfg = SpikingConfig(decay=0.6)
    x = rng.uniform(0, 1, (16, 1, 28, 28)).astype(np.float32)

    def crnn():
        state = NeuronState.zeros(geo, 16, np.float32)
        relax(state, params, geo, dcfg, x, snapshot=False)

    def snn():
        state = NeuronState.zeros(geo, 16, np.float32)
        relax(state, params, geo, dcfg, x, mode="snn", scfg=scfg, snapshot=False)

    return [("relax crnn 2C2FC T=50", crnn), ("relax snn 2C2FC T=50", snn)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    backends = kernels.available_backends()
    rng = np.random.default_rng(11)
    cases = kernel_cases(rng) + relax_case(rng)

    results = {}
    for backend in backends:
        with kernels.use_backend(backend):
            for name, fn in cases:
                results[(name, backend)] = timeit(fn, args.repeats)

    width = max(len(n) for n, _ in cases)
    header = f"{'case':<{width}}  " + "  ".join(f"{b:>10}" for b in backends)
    if len(backends) > 1:
        header += f"  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, _ in cases:
        row = f"{name:<{width}}  "
        times = [results[(name, b)] for b in backends]
        row += "  ".join(f"{t * 1e3:9.2f}ms" for t in times)
        if len(backends) > 1:
            row += f"  {times[backends.index('numpy')] / times[backends.index('numba')]:7.1f}x"
        print(row)


if __name__ == "__main__":
    main()
