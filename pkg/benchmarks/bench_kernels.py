"""Time the numba and numpy kernel backends, then one vit-tiny MAE step under each.

    python3 benchmarks/bench_kernels.py [--repeat 20]

The step comparison runs in subprocesses because the backend is fixed at
import time by ``DESKMAE_NUMBA``.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from deskmae import _kernels

STEP = """
import time, numpy as np
from deskmae.mae import MaeConfig, MaeModel, make_masks
from deskmae.optim import Optimizer, OptimSpec
from deskmae.vit import get_recipe
m = MaeModel.build(get_recipe("vit-tiny"), MaeConfig(decoder_width=64, decoder_depth=1, decoder_heads=2))
opt = Optimizer(list(m.named_parameters()), OptimSpec())
x = np.random.default_rng(0).random((64, 4, 32, 32)).astype(np.float32)
plan = make_masks(64, 0.75, range(64))
def step():
    m.zero_grad(); loss = m.loss(x, plan); loss.backward(); opt.step(1e-4)
step()
t = time.perf_counter()
for _ in range({n}):
    step()
print((time.perf_counter() - t) / {n})
"""


def kernel_cases():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64 * 17, 128)).astype(np.float32)
    g = rng.standard_normal(x.shape).astype(np.float32)
    gamma, beta = np.ones(128, np.float32), np.zeros(128, np.float32)
    att = rng.standard_normal((64 * 4 * 17, 17)).astype(np.float32)
    _, xhat, rstd = _kernels.numpy_impl.layernorm_fwd(x, gamma, beta, 1e-6)
    p, t = rng.integers(0, 6, 512 * 512), rng.integers(0, 6, 512 * 512)
    w = rng.standard_normal(1_000_000).astype(np.float32)
    gw = rng.standard_normal(w.shape).astype(np.float32)
    m1, v1 = np.zeros_like(w), np.zeros_like(w)
    return {
        "layernorm_fwd": lambda k: k.layernorm_fwd(x, gamma, beta, 1e-6),
        "layernorm_bwd": lambda k: k.layernorm_bwd(g, xhat, rstd, gamma),
        "gelu_fwd": lambda k: k.gelu_fwd(x),
        "gelu_bwd": lambda k: k.gelu_bwd(x, g),
        "softmax_fwd": lambda k: k.softmax_fwd(att),
        "confusion": lambda k: k.confusion(p, t, 6),
        "adamw_1M": lambda k: k.adamw_update(w, gw, m1, v1, 1e-4, 0.9, 0.95, 1e-8, 0.05, 0.1, 0.05),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=3)
    args = ap.parse_args()
    print(f"{'kernel':<16}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in kernel_cases().items():
        fn(_kernels.numba_impl)  # compile outside the timing
        t_np = min(timeit.repeat(lambda: fn(_kernels.numpy_impl), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fn(_kernels.numba_impl), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<16}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.2f}x")
    res = {}
    for flag in ("0", "1"):
        out = subprocess.run([sys.executable, "-c", STEP.format(n=args.steps)], capture_output=True, text=True,
                             env={**os.environ, "DESKMAE_NUMBA": flag}, check=True)
        res[flag] = float(out.stdout.strip()) * 1e3
    print(f"{'mae step b=64':<16}{res['0']:>10.1f}{res['1']:>10.1f}{res['0'] / res['1']:>8.2f}x")


if __name__ == "__main__":
    main()
