"""Compare the compiled and pure-numpy convolution kernels.

    python benchmarks/bench_kernels.py            # kernel timings
    python benchmarks/bench_kernels.py --steps 5  # plus whole training steps

Kernel timings run both backends in one process. Training steps need a
fresh interpreter per backend because the choice is made at import.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from gexmap.tensor.kernels import available_backends

STEP_SCRIPT = """
import time
from gexmap.model import DenseExpressionModel, ModelConfig
from gexmap.synth import synth_generate
from gexmap.tensor import BACKEND
from gexmap.train import Trainer, TrainConfig
slide, table, _ = synth_generate(96, 96, 16, 64, 4.0, seed=42)
trainer = Trainer(DenseExpressionModel(ModelConfig(genes=16), seed=42), [(slide, table)], TrainConfig(epochs={steps}))
trainer.fit(1)
t0 = time.perf_counter()
trainer.fit({steps})
print(BACKEND, (time.perf_counter() - t0) / {steps})
"""


def kernel_cases(dtype):
    rng = np.random.default_rng(0)
    C, H, W, k = 32, 48, 48, 3
    xp = rng.standard_normal((C, H + 2, W + 2)).astype(dtype)
    cols = rng.standard_normal((C * k * k, H * W)).astype(dtype)
    w = rng.standard_normal((C, k, k)).astype(dtype)
    g = rng.standard_normal((C, H, W)).astype(dtype)
    return {
        "im2col": lambda m: m.im2col(xp, k, 1, H, W),
        "col2im": lambda m: m.col2im(cols, C, H + 2, W + 2, k, 1, H, W),
        "dw_forward": lambda m: m.dw_forward(xp, w, H, W),
        "dw_backward": lambda m: m.dw_backward(xp, w, g),
    }


def bench_kernels(repeat: int) -> None:
    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy fallback is available")
    names = list(backends)
    print(f"{'kernel':12s} {'dtype':8s} " + " ".join(f"{n + ' ms':>12s}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for dtype in (np.float32, np.float64):
        for kernel, call in kernel_cases(dtype).items():
            ms = []
            for n in names:
                mod = backends[n]
                number = 20
                best = min(timeit.repeat(lambda: call(mod), number=number, repeat=repeat)) / number
                ms.append(best * 1e3)
            line = f"{kernel:12s} {np.dtype(dtype).name:8s} " + " ".join(f"{t:12.3f}" for t in ms)
            if len(ms) > 1:
                line += f"   {ms[0] / ms[1]:7.2f}x"
            print(line)


def bench_steps(steps: int) -> None:
    code = STEP_SCRIPT.format(steps=steps)
    for force_python in (False, True):
        env = dict(os.environ)
        env.pop("GEXMAP_PURE_PYTHON", None)
        if force_python:
            env["GEXMAP_PURE_PYTHON"] = "1"
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout.split()
        print(f"training step ({out[0]}): {float(out[1]) * 1e3:.1f} ms")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--steps", type=int, default=0, help="also time this many training steps per backend")
    args = p.parse_args()
    bench_kernels(args.repeat)
    if args.steps:
        bench_steps(args.steps)


if __name__ == "__main__":
    main()
