#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy reference backend.

Times each hot kernel on the default training shapes (batch 8, 65 tokens,
4 heads of width 16) plus a full train step through the tensor engine with
each backend forced. Run after `pip install -e .`:

    python benchmarks/bench_kernels.py [--repeats 200]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np


def _timeit(fn, repeats):
    fn()   # warm
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def kernel_cases(mod, dtype=np.float32):
    rng = np.random.default_rng(0)
    g, t, dh = 32, 65, 16          # batch 8 x 4 heads
    q, k, v = (np.ascontiguousarray(rng.normal(size=(g, t, dh)).astype(dtype))
               for _ in range(3))
    dout = np.ascontiguousarray(rng.normal(size=(g, t, dh)).astype(dtype))
    scale = 1.0 / np.sqrt(dh)
    _, probs = mod.attention_fwd(q, k, v, scale)

    x2 = np.ascontiguousarray(rng.normal(size=(8 * 65, 64)).astype(dtype))
    dy2 = np.ascontiguousarray(rng.normal(size=x2.shape).astype(dtype))
    xhat, inv = mod.layer_norm_fwd(x2, 1e-5)

    flat = np.ascontiguousarray(rng.normal(size=8 * 65 * 256).astype(dtype))
    dflat = np.ascontiguousarray(rng.normal(size=flat.size).astype(dtype))

    ang = rng.uniform(0, 2 * np.pi, size=(t, dh // 2))
    cos = np.ascontiguousarray(np.cos(ang).astype(dtype))
    sin = np.ascontiguousarray(np.sin(ang).astype(dtype))

    p = np.ascontiguousarray(rng.normal(size=300_000).astype(dtype))
    gr = np.ascontiguousarray(rng.normal(size=p.size).astype(dtype))
    m = np.zeros_like(p)
    vv = np.zeros_like(p)

    return {
        "attention_fwd": lambda: mod.attention_fwd(q, k, v, scale),
        "attention_bwd": lambda: mod.attention_bwd(dout, q, k, v, probs, scale),
        "layer_norm_fwd": lambda: mod.layer_norm_fwd(x2, 1e-5),
        "layer_norm_bwd": lambda: mod.layer_norm_bwd(dy2, xhat, inv),
        "gelu_fwd": lambda: mod.gelu_fwd(flat),
        "gelu_bwd": lambda: mod.gelu_bwd(dflat, flat),
        "rope_fwd": lambda: mod.rope_fwd(q, cos, sin),
        "softmax_fwd": lambda: mod.softmax_fwd(x2),
        "adam_step": lambda: mod.adam_step(p, gr, m, vv, 1e-3, 0.9, 0.999,
                                           1e-8, 0.1, 0.001),
    }


def bench_kernels(repeats):
    from psdt.kernels import reference as ref
    try:
        from psdt.kernels import _fast as fast
    except ImportError:
        print("compiled backend not built; nothing to compare")
        return
    ref_cases = kernel_cases(ref)
    fast_cases = kernel_cases(fast)
    print(f"{'kernel':<16s} {'reference':>12s} {'fast':>12s} {'speedup':>8s}")
    for name in ref_cases:
        tr = _timeit(ref_cases[name], repeats)
        tf = _timeit(fast_cases[name], repeats)
        print(f"{name:<16s} {tr * 1e6:>10.1f}us {tf * 1e6:>10.1f}us {tr / tf:>7.2f}x")


def bench_train_step(steps=30):
    """One-process-per-backend full train-step comparison."""
    script = r"""
import time
import numpy as np
from psdt import kernels
from psdt.config import config_from_dict
from psdt.model import init_params
from psdt.optim import Adam
from psdt import flow, tensor as T
from psdt.train import velocity_fn

cfg = config_from_dict({})
rng = np.random.default_rng(0)
params = init_params(cfg.model, rng)
opt = Adam({n: p for n, p in params.items()}, lr=1e-3)
x0 = rng.normal(size=(8, 1, 32, 32)).astype(np.float32)
tids = rng.integers(0, 3, size=8)
fn = velocity_fn(params, cfg.model)

def step():
    with T.Tape() as tape:
        loss = flow.cfm_loss(fn, x0, tids, rng)
        tape.backward(loss)
        grads = {n: tape.grad(p) for n, p in opt.params.items()}
    opt.step(grads)

step()
t0 = time.perf_counter()
for _ in range(%d):
    step()
dt = (time.perf_counter() - t0) / %d
print(f"{kernels.BACKEND} {dt*1e3:.2f}")
""" % (steps, steps)
    rows = {}
    for env_extra in ({}, {"PSDT_PURE_PYTHON": "1"}):
        env = dict(os.environ, **env_extra)
        out = subprocess.run([sys.executable, "-c", script], env=env,
                             capture_output=True, text=True, check=True)
        backend, ms = out.stdout.split()
        rows[backend] = float(ms)
    print(f"\n{'train step':<16s} " +
          " ".join(f"{k}: {v:.2f} ms" for k, v in rows.items()), end="")
    if "fast" in rows and "reference" in rows:
        print(f"  (speedup {rows['reference'] / rows['fast']:.2f}x)")
    else:
        print()


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=200)
    ap.add_argument("--train-steps", type=int, default=30)
    args = ap.parse_args()
    bench_kernels(args.repeats)
    bench_train_step(args.train_steps)
