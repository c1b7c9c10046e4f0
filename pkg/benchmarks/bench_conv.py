"""Compiled vs numpy-fallback kernels on encoder-sized workloads.

    python benchmarks/bench_conv.py [--repeat 5] [--batch 32]

Times the three convolution kernels at every dilation/kernel pair the encoder
uses, then one full training step of the default model, once per backend.
Reports the best of ``--repeat`` runs and the fallback/compiled speed ratio.
"""
import argparse
import time

import numpy as np

from rscnet import numerics as nx
from rscnet.model import ModelConfig, RscnetModel
from rscnet.numerics.backend import kernels
from rscnet.train import train_step

KERNEL_CASES = [((3, 3), 1), ((1, 5), 2), ((5, 1), 2), ((1, 5), 3), ((5, 1), 3), ((3, 3), 2)]


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def conv_workload(kernel, dilation, batch, channels, height, width, rng):
    kh, kw = kernel
    x = rng.standard_normal((batch, channels, height, width)).astype(np.float32)
    w = rng.standard_normal((channels, channels, kh, kw)).astype(np.float32)
    ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2

    def run():
        k = kernels()
        out = np.zeros_like(x)
        k.conv2d_forward(x, w, out, dilation, dilation, ph, pw)
        gx = np.zeros_like(x)
        k.conv2d_backward_input(out, w, gx, dilation, dilation, ph, pw)
        gw = np.zeros(w.shape, np.float64)
        k.conv2d_backward_weight(out, x, gw, dilation, dilation, ph, pw)
    return run


def step_workload(batch, rng):
    cfg = ModelConfig()
    model = RscnetModel.initialize(cfg, seed=0)
    x = nx.Tensor(rng.standard_normal((batch,) + cfg.sample_shape), dtype=np.float32)
    labels = rng.integers(0, cfg.n_classes, batch)
    state = nx.OptimizerState(0.0, 0.9, 0.0)

    def run():
        train_step(model, x, labels, 50.0, state, lr=0.0)
    return run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timed runs per case (best is kept)")
    ap.add_argument("--batch", type=int, default=32, help="batch size")
    ap.add_argument("--channels", type=int, default=2, help="conv channels (encoder width)")
    args = ap.parse_args(argv)

    backends = nx.available_backends()
    if "ext" not in backends:
        print("compiled backend not built; timing the fallback only")
    rng = np.random.default_rng(0)
    cases = [(f"conv {k[0]}x{k[1]} d={d}",
              conv_workload(k, d, args.batch, args.channels, 30, 50, rng))
             for k, d in KERNEL_CASES]
    cases.append(("train step (default model)", step_workload(args.batch, rng)))

    previous = nx.get_backend()
    print(f"{'case':<28}" + "".join(f"{b + ' (ms)':>14}" for b in backends) + f"{'ratio':>10}")
    try:
        for name, run in cases:
            row = {}
            for b in backends:
                nx.set_backend(b)
                run()    # warm-up
                row[b] = best_time(run, args.repeat) * 1e3
            ratio = row["python"] / row["ext"] if "ext" in row else float("nan")
            print(f"{name:<28}" + "".join(f"{row[b]:>14.2f}" for b in backends) + f"{ratio:>10.2f}")
    finally:
        nx.set_backend(previous)


if __name__ == "__main__":
    main()
