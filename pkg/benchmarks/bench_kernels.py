"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 50] [--batch 64]

Per-kernel timings call both modules directly. The end-to-end row times one
supernet forward+backward in a subprocess per backend, because the backend
is chosen once, at import time.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from hanf import _kernels_py

try:
    from hanf import _kernels
except ImportError:
    _kernels = None

STEP_SNIPPET = """
import time, numpy as np
from hanf.diffcore import Tensor, Tape, backward, cross_entropy
from hanf.supernet import SuperNet, NetworkSpec, CellSpec
net = SuperNet(NetworkSpec(cell_count=3, channels=8, num_classes=10, in_channels=1), CellSpec(nodes=5), seed=0)
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=({batch}, 1, 8, 8))); y = rng.integers(0, 10, {batch})
def step():
    t = Tape(); backward(t, cross_entropy(t, net.forward(t, x, training=True, rng=rng), y))
step()
t0 = time.perf_counter()
for _ in range({repeat}): step()
print((time.perf_counter() - t0) / {repeat})
"""


def cases(batch: int):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(batch, 8, 8, 8))
    w3, w5 = rng.normal(size=(8, 3, 3)), rng.normal(size=(8, 5, 5))
    g = rng.normal(size=x.shape)
    gamma, beta = np.ones(8), np.zeros(8)
    _, xhat, inv = _kernels_py.batchnorm_forward(x, gamma, beta, 1e-5)
    _, arg = _kernels_py.maxpool_forward(x, 3, 1, 1)
    return {
        "depthwise 3x3 fwd": lambda m: m.depthwise_forward(x, w3, 1, 1, 1),
        "depthwise 3x3 bwd": lambda m: m.depthwise_backward(x, w3, g, 1, 1, 1),
        "depthwise 5x5 d2 fwd": lambda m: m.depthwise_forward(x, w5, 1, 4, 2),
        "depthwise 5x5 d2 bwd": lambda m: m.depthwise_backward(x, w5, g, 1, 4, 2),
        "maxpool 3x3 fwd": lambda m: m.maxpool_forward(x, 3, 1, 1),
        "maxpool 3x3 bwd": lambda m: m.maxpool_backward(g, arg, x.shape),
        "avgpool 3x3 fwd": lambda m: m.avgpool_forward(x, 3, 1, 1),
        "avgpool 3x3 bwd": lambda m: m.avgpool_backward(g, x.shape, 3, 1, 1),
        "batchnorm fwd": lambda m: m.batchnorm_forward(x, gamma, beta, 1e-5),
        "batchnorm bwd": lambda m: m.batchnorm_backward(g, xhat, gamma, inv),
    }


def time_call(fn, repeat: int) -> float:
    fn()
    return min(timeit.repeat(fn, number=repeat, repeat=3)) / repeat


def time_step(pure: bool, batch: int, repeat: int) -> float:
    env = dict(os.environ, HANF_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run(
        [sys.executable, "-c", STEP_SNIPPET.format(batch=batch, repeat=repeat)],
        env=env, capture_output=True, text=True, check=True,
    )
    return float(out.stdout.strip())


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; only the numpy fallback is available", file=sys.stderr)
    print(f"{'kernel':<24}{'numpy ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, fn in cases(args.batch).items():
        py = time_call(lambda: fn(_kernels_py), args.repeat) * 1e3
        if _kernels is None:
            print(f"{name:<24}{py:12.3f}{'-':>14}{'-':>10}")
            continue
        cc = time_call(lambda: fn(_kernels), args.repeat) * 1e3
        print(f"{name:<24}{py:12.3f}{cc:14.3f}{py / cc:9.1f}x")
    steps = max(1, args.repeat // 10)
    py = time_step(True, args.batch, steps) * 1e3
    if _kernels is None:
        print(f"{'supernet fwd+bwd':<24}{py:12.1f}{'-':>14}{'-':>10}")
    else:
        cc = time_step(False, args.batch, steps) * 1e3
        print(f"{'supernet fwd+bwd':<24}{py:12.1f}{cc:14.1f}{py / cc:9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
