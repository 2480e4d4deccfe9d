"""Compare the numba and numpy kernel backends.

Run with ``python3 benchmarks/bench_kernels.py``.  Kernel timings call both
backend tables directly in one process; the train-step timing launches a
subprocess per backend so that ``SAUNET_NUMBA`` is read at import time.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from saunet import _kernels as K


def best_of(fn, repeat: int) -> float:
    fn()  # warm-up (numba compiles on first call)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    # shapes of the tiny preset at 64x64 with batch 8
    x = rng.standard_normal((8, 32, 66, 66)).astype(np.float32)
    cols = K.NUMPY["im2col"](x, 3, 3, 1, 64, 64)
    pool_in = rng.standard_normal((8, 32, 64, 64)).astype(np.float32)
    _, arg = K.NUMPY["maxpool_fwd"](pool_in, 2)
    g = rng.standard_normal((8, 32, 32, 32)).astype(np.float32)
    mag = rng.random((64, 64))
    gx, gy = rng.standard_normal((2, 64, 64))
    return {
        "im2col": lambda b: b["im2col"](x, 3, 3, 1, 64, 64),
        "col2im": lambda b: b["col2im"](cols, 32, 66, 66, 3, 3, 1, 64, 64),
        "maxpool_fwd": lambda b: b["maxpool_fwd"](pool_in, 2),
        "maxpool_bwd": lambda b: b["maxpool_bwd"](g, arg, 2),
        "nms": lambda b: b["nms"](mag, gx, gy),
    }


STEP_SNIPPET = """
import time, numpy as np
from saunet import BACKEND
from saunet import tensor as T
from saunet.data import Batch
from saunet.model import build, preset
from saunet.objectives import LossWeights
from saunet.trainer import RAdam, batch_losses
rng = np.random.default_rng(0)
b = Batch(rng.standard_normal((8, 1, 64, 64)).astype(np.float32), (rng.random((8, 1, 64, 64)) > 0.9).astype(np.float32),
          rng.integers(0, 4, (8, 64, 64)), (rng.random((8, 1, 64, 64)) > 0.9).astype(np.float32), [str(i) for i in range(8)])
m = build(preset("tiny"), seed=0)
opt = RAdam(m.parameters())
times = []
for i in range({steps} + 1):
    t0 = time.perf_counter()
    m.registry.zero_grad()
    tape = T.Tape()
    with T.recording(tape):
        loss = batch_losses(m, b, LossWeights(1, 1, 1))[0]
    tape.backward(loss, leaves=m.parameters().values())
    opt.step(5e-4)
    times.append(time.perf_counter() - t0)
print(BACKEND, min(times[1:]))
"""


def train_step(backend: str, steps: int) -> tuple[str, float]:
    env = {**os.environ, "SAUNET_NUMBA": "1" if backend == "numba" else "0"}
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env, check=True,
                         capture_output=True, text=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--steps", type=int, default=3)
    args = p.parse_args(argv)
    if not K.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  identical")
    for name, fn in kernel_cases(rng).items():
        t_np = best_of(lambda: fn(K.NUMPY), args.repeat)
        t_nb = best_of(lambda: fn(K.NUMBA), args.repeat)
        a, b = fn(K.NUMPY), fn(K.NUMBA)
        same = all(np.array_equal(u, v) for u, v in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        print(f"{name:<14}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x  {same}")

    print()
    results = {be: train_step(be, args.steps) for be in ("numpy", "numba")}
    for be, (reported, secs) in results.items():
        print(f"train step, tiny preset, batch 8 at 64x64, {reported:<6} backend: {secs:.3f} s")
    print(f"numba speedup on a full step: {results['numpy'][1] / results['numba'][1]:.2f}x")


if __name__ == "__main__":
    main()
