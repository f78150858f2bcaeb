"""Finite-difference verification suite: every differentiable op, then the
full flow-matching and tail-conditioned losses through the real model, all
in float64 with central differences."""

from __future__ import annotations

import numpy as np

from psdt import flow, recraft as recraft_mod
from psdt import tensor as T
from psdt.config import Config
from psdt.model import init_params, rope_tables
from psdt.train import velocity_fn


def _t(rng, *shape):
    return T.tensor(rng.normal(size=shape), dtype=np.float64, requires_grad=True)


def op_checks(seed: int = 0, samples_per_param: int = 12) -> dict[str, float]:
    """Per-op gradient checks on small random tensors; returns max relative
    error per op name."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def check(name, f, params):
        results[name] = T.grad_check(f, params, samples_per_param=samples_per_param,
                                     seed=seed)

    a, b = _t(rng, 3, 5), _t(rng, 3, 5)
    br = _t(rng, 5)
    check("add", lambda: T.tsum(T.mul(T.add(a, br), T.add(a, b))), {"a": a, "b": b, "br": br})
    check("sub", lambda: T.tsum(T.mul(T.sub(a, b), T.sub(a, b))), {"a": a, "b": b})
    check("mul", lambda: T.tsum(T.mul(T.mul(a, b), a)), {"a": a, "b": b})
    check("neg", lambda: T.tsum(T.mul(T.neg(a), b)), {"a": a, "b": b})
    check("scale", lambda: T.tsum(T.mul(T.scale(a, 1.7), b)), {"a": a, "b": b})

    m1, m2 = _t(rng, 3, 4), _t(rng, 4, 2)
    check("matmul", lambda: T.tsum(T.mul(T.matmul(m1, m2), T.matmul(m1, m2))),
          {"m1": m1, "m2": m2})
    x3 = _t(rng, 2, 3, 4)
    w = _t(rng, 5, 4)
    wb = _t(rng, 5)
    check("linear", lambda: T.tsum(T.mul(T.linear(x3, w, wb), T.linear(x3, w, wb))),
          {"x": x3, "w": w, "b": wb})

    sm = _t(rng, 4, 6)
    check("softmax", lambda: T.tsum(T.mul(T.softmax(sm, axis=-1), sm)), {"x": sm})
    gn, bs = _t(rng, 6), _t(rng, 6)
    check("layer_norm", lambda: T.tsum(T.mul(T.layer_norm(sm, gn, bs), sm)),
          {"x": sm, "gain": gn, "bias": bs})
    check("gelu", lambda: T.tsum(T.mul(T.gelu(sm), sm)), {"x": sm})

    r = _t(rng, 2, 12)
    check("reshape", lambda: T.tsum(T.mul(T.reshape(r, (2, 3, 4)), T.reshape(r, (2, 3, 4)))),
          {"x": r})
    tr = _t(rng, 2, 3, 4)
    check("transpose", lambda: T.tsum(T.mul(T.transpose(tr, (2, 0, 1)),
                                            T.transpose(tr, (2, 0, 1)))), {"x": tr})
    check("slice", lambda: T.tsum(T.mul(tr[:, 1:, ::2], tr[:, 1:, ::2])), {"x": tr})
    c1, c2 = _t(rng, 2, 3), _t(rng, 2, 2)
    check("concat", lambda: T.tsum(T.mul(T.concat([c1, c2], axis=1),
                                         T.concat([c1, c2], axis=1))), {"c1": c1, "c2": c2})
    table = _t(rng, 5, 4)
    ids = np.array([0, 3, 3, 1])
    check("embedding", lambda: T.tsum(T.mul(T.embedding(table, ids),
                                            T.embedding(table, ids))), {"table": table})
    check("mean", lambda: T.tmean(T.mul(a, a)), {"a": a})
    check("sum", lambda: T.tsum(T.mul(a, b)), {"a": a, "b": b})
    check("mse", lambda: T.mse(a, b), {"a": a, "b": b})

    q = _t(rng, 2, 5, 8)
    k = _t(rng, 2, 5, 8)
    v = _t(rng, 2, 5, 8)
    pos = np.stack([np.arange(5), np.arange(5)[::-1]], axis=1)
    rot = rope_tables(pos, 4, 100.0, dtype=np.float64)
    check("rope", lambda: T.tsum(T.mul(T.rope(T.reshape(q, (2, 2, 5, 4)), rot.cos, rot.sin),
                                       T.reshape(k, (2, 2, 5, 4)))), {"q": q, "k": k})
    check("attention", lambda: T.tsum(T.mul(T.attention(q, k, v), q)),
          {"q": q, "k": k, "v": v})
    rot8 = rope_tables(pos, 8, 100.0, dtype=np.float64)
    check("mma", lambda: T.tsum(T.mul(T.mma(q, k, v, rot8.cos, rot8.sin, 2), q)),
          {"q": q, "k": k, "v": v})
    z = _t(rng, 3, 4, 2)
    bstack = _t(rng, 2, 5, 2)
    tids = np.array([0, 1, 0])
    check("task_linear", lambda: T.tsum(T.mul(T.task_linear(z, bstack, tids),
                                              T.task_linear(z, bstack, tids))),
          {"z": z, "bstack": bstack})
    return results


def loss_checks(cfg: Config, seed: int = 0,
                samples_per_param: int = 4) -> dict[str, float]:
    """Gradients of the flow-matching and conditioned losses through the
    full model on a 1-sample batch, against central differences."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg.model, rng, dtype=np.float64)
    # break the zero-init symmetry so the check exercises every path
    for p in params.values():
        p.data[...] = rng.normal(0.0, 0.05, size=p.shape)

    shape = (1, cfg.model.channels, cfg.model.image_height, cfg.model.image_width)
    x0 = rng.normal(size=shape)
    eps = rng.standard_normal(shape)
    t = rng.uniform(0.1, 0.9, size=1)
    tids = np.array([seed % cfg.model.task_vocab])
    fn = velocity_fn(params, cfg.model)

    # coordinates with |grad| under 1e-7 are pure fd roundoff against the
    # 1e-8 denominator floor at this loss scale (see grad_check docstring)
    results = {}
    results["cfm_loss"] = T.grad_check(
        lambda: flow.cfm_loss_given(fn, x0, tids, t, eps), params,
        samples_per_param=samples_per_param, seed=seed, skip_below=1e-7)
    mask = recraft_mod.build_condition_mask(cfg.model)
    results["recraft_loss"] = T.grad_check(
        lambda: recraft_mod.recraft_loss_given(fn, x0, tids, mask, t, eps), params,
        samples_per_param=samples_per_param, seed=seed, skip_below=1e-7)
    return results


def run_suite(cfg: Config, seed: int = 0, log=print,
              tol: float = 1e-4) -> tuple[float, bool]:
    """Full suite; returns (worst error, ok)."""
    worst = 0.0
    for name, err in op_checks(seed).items():
        log(f"op {name:<12s} max rel err {err:.3e}")
        worst = max(worst, err)
    for name, err in loss_checks(cfg, seed).items():
        log(f"{name:<15s} max rel err {err:.3e}")
        worst = max(worst, err)
    ok = worst < tol
    log(f"grad-check {'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tol {tol:g})")
    return worst, ok
