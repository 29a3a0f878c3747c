"""Time the numba kernels against their numpy twins, plus one training step.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Kernel timings exclude JIT compilation (each kernel is warmed up first).
The end-to-end row switches the active backend for a full forward/backward
step of the toy model.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from surgphase import _kernels
from surgphase.model import ModelConfig, PhaseModel, param_depth
from surgphase.trainer import AdamState, OptimConfig, train_step


def kernel_cases(rng):
    x = rng.standard_normal((4096, 64))
    mask = rng.random((4096, 64)) < 0.8
    mask[:, 0] = True
    y = _kernels.numpy_backend.softmax_rows(x, mask)
    g, b = rng.standard_normal(64), rng.standard_normal(64)
    _, xhat, rstd = _kernels.numpy_backend.layer_norm_rows(x, g, b, 1e-6)
    gt = np.sort(rng.integers(0, 7, 20000))
    pred = rng.integers(0, 7, 20000)
    return {
        "bmm 256x(16x8 @ 8x16)": ("bmm", (rng.standard_normal((256, 16, 8)), rng.standard_normal((256, 8, 16)))),
        "bmm 1x(2048x32 @ 32x32)": ("bmm", (rng.standard_normal((1, 2048, 32)), rng.standard_normal((1, 32, 32)))),
        "softmax_rows 4096x64": ("softmax_rows", (x, mask)),
        "softmax_rows_backward": ("softmax_rows_backward", (y, x)),
        "layer_norm_rows 4096x64": ("layer_norm_rows", (x, g, b, 1e-6)),
        "layer_norm_rows_backward": ("layer_norm_rows_backward", (x, xhat, rstd, g)),
        "gelu 4096x64": ("gelu", (x,)),
        "gelu_backward": ("gelu_backward", (x, x)),
        "relax_predictions 20k": ("relax_predictions", (gt, pred, 25)),
        "confusion_counts 20k": ("confusion_counts", (gt, pred, 7)),
    }


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def train_step_time(repeat):
    cfg = ModelConfig(L=2, D=32, heads=4, T=8, R=4, H=16, W=16, P=4)
    model = PhaseModel.init(cfg)
    frames = np.random.default_rng(0).standard_normal((8, 8, 3, 16, 16))
    labels = np.arange(8) % 7
    depths = {k: param_depth(k, cfg.L) for k in model.params}

    def step():
        train_step(model, frames, labels, AdamState(), OptimConfig(lr=0.0), depths)

    step()
    return best_of(step, max(3, repeat // 4))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    rows = []
    with threadpool_limits(limits=1):
        for label, (name, inputs) in kernel_cases(rng).items():
            f_np = getattr(_kernels.numpy_backend, name)
            f_nb = getattr(_kernels.numba_backend, name)
            f_nb(*inputs)  # compile
            rows.append((label, best_of(lambda: f_np(*inputs), args.repeat),
                         best_of(lambda: f_nb(*inputs), args.repeat)))
        prev = _kernels.active
        try:
            times = {}
            for name in ("numpy", "numba"):
                _kernels.use_backend(name)
                times[name] = train_step_time(args.repeat)
        finally:
            _kernels.active = prev
        rows.append(("train_step, batch 8 (end to end)", times["numpy"], times["numba"]))

    w = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{w}}  {'numpy ms':>9}  {'numba ms':>9}  {'speedup':>7}")
    for label, t_np, t_nb in rows:
        print(f"{label:<{w}}  {1e3 * t_np:9.3f}  {1e3 * t_nb:9.3f}  {t_np / t_nb:7.2f}x")


if __name__ == "__main__":
    main()
