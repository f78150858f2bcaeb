"""Evaluation: monotonicity of generated sequences (with a permuted-frame
paired baseline), tail-frame consistency of the conditioned model, and the
JSON report the pipeline emits."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from psdt import flow, lora as lora_mod, recraft as recraft_mod
from psdt.config import Config, config_to_dict
from psdt.layout import decompose, serpentine_order
from psdt.synthdata import load_dataset, monotonicity
from psdt.train import to_model_space, to_unit_interval, velocity_fn


def _non_identity_permutation(rng: np.random.Generator, k: int) -> np.ndarray:
    while True:
        perm = rng.permutation(k)
        if not np.array_equal(perm, np.arange(k)):
            return perm


def eval_generation(params, cfg: Config, lora: lora_mod.LoraSet | None,
                    n_per_task: int = 32, seed: int = 0, log=print) -> dict:
    """Sample n sequences per task and score monotonicity, paired against
    the same frames randomly permuted."""
    mc = cfg.model
    order = serpentine_order(mc.grid_rows, mc.grid_cols)
    shape = (n_per_task, mc.channels, mc.image_height, mc.image_width)
    tasks = {}
    for tid, name in enumerate(cfg.data.task_names):
        adapters = None
        if lora is not None:
            sel = tid if lora.n_tasks > 1 else 0
            adapters = lora_mod.LoraRuntime(
                lora, omega=lora_mod.one_hot_omega(sel, lora.n_tasks))
        fn = velocity_fn(params, mc, adapters)
        rng = np.random.default_rng([seed, 10, tid])
        task_vec = np.full(n_per_task, tid)
        grids = flow.euler_sample(lambda z, t: fn(z, t, task_vec),
                                  shape, cfg.flow.steps, rng)
        perm_rng = np.random.default_rng([seed, 11, tid])
        scores, perm_scores, wins = [], [], 0
        for i in range(n_per_task):
            frames = decompose(to_unit_interval(grids[i, 0]), order)
            s = monotonicity(frames)
            perm = _non_identity_permutation(perm_rng, len(frames))
            sp = monotonicity([frames[j] for j in perm])
            scores.append(s)
            perm_scores.append(sp)
            if s > sp:
                wins += 1
        tasks[name] = {
            "monotonicity": float(np.mean(scores)),
            "n": n_per_task,
            "perm_monotonicity": float(np.mean(perm_scores)),
            "perm_win_rate": wins / n_per_task,
        }
        log(f"task {name}: monotonicity {tasks[name]['monotonicity']:.4f} "
            f"(permuted {tasks[name]['perm_monotonicity']:.4f}, "
            f"win rate {tasks[name]['perm_win_rate']:.2f})")
    return tasks


def eval_ground_truth(cfg: Config, data_dir, log=print) -> dict:
    """Monotonicity of the stored dataset itself (no model)."""
    index, grids, task_ids, _ = load_dataset(data_dir)
    order = serpentine_order(*cfg.data.manifest().grid)
    tasks = {}
    for tid, name in enumerate(cfg.data.task_names):
        sel = task_ids == tid
        scores = [monotonicity(decompose(g, order)) for g in grids[sel]]
        tasks[name] = {"monotonicity": float(np.mean(scores)), "n": int(sel.sum())}
        log(f"task {name}: ground-truth monotonicity {tasks[name]['monotonicity']:.4f}")
    return tasks


def eval_recraft(params, cfg: Config, lora: lora_mod.LoraSet | None, data_dir,
                 n_samples: int = 32, seed: int = 0, log=print) -> dict:
    """Tail-conditioned generation against held-out sequences.

    For each held-out sample, generate from its tail frame and compare the
    generated penultimate frame (MSE, pixel space) against the true
    penultimate frame and against a mismatched sample's; a win is a strictly
    smaller MSE for the true one.
    """
    index, grids, task_ids, splits = load_dataset(data_dir)
    mc = cfg.model
    order = serpentine_order(mc.grid_rows, mc.grid_cols)
    mask = recraft_mod.build_condition_mask(mc)
    k = len(order)

    val_by_task: dict[int, list[int]] = {}
    for i in np.flatnonzero(splits == "val"):
        val_by_task.setdefault(int(task_ids[i]), []).append(int(i))
    picks: list[int] = []
    cursor = 0
    while len(picks) < n_samples and any(val_by_task.values()):
        tid = cursor % len(cfg.data.task_names)
        if val_by_task.get(tid):
            picks.append(val_by_task[tid].pop(0))
        cursor += 1
    if len(picks) < 2:
        raise ValueError("need at least 2 held-out samples for the paired test")

    # group picks by task for batched integration
    frames_by_idx = {i: decompose(grids[i], order) for i in picks}
    gen_penult: dict[int, np.ndarray] = {}
    for tid in sorted({int(task_ids[i]) for i in picks}):
        group = [i for i in picks if task_ids[i] == tid]
        tails = np.stack([to_model_space(frames_by_idx[i][k - 1]) for i in group])[:, None]
        adapters = None
        if lora is not None:
            sel = tid if lora.n_tasks > 1 else 0
            adapters = lora_mod.LoraRuntime(
                lora, omega=lora_mod.one_hot_omega(sel, lora.n_tasks))
        fn = velocity_fn(params, mc, adapters)
        rng = np.random.default_rng([seed, 20, tid])
        frames, _ = recraft_mod.recraft_sample(
            fn, mc, tails, np.full(len(group), tid), mask, cfg.flow.steps, rng,
            batch=len(group))
        for j, i in enumerate(group):
            gen_penult[i] = to_unit_interval(frames[j][k - 2])

    # mismatch partner: next pick of the same task, cyclically
    partner: dict[int, int] = {}
    for tid in sorted({int(task_ids[i]) for i in picks}):
        group = [i for i in picks if task_ids[i] == tid]
        if len(group) == 1:
            partner[group[0]] = group[0]
            continue
        for j, i in enumerate(group):
            partner[i] = group[(j + 1) % len(group)]

    mses, wins, judged = [], 0, 0
    for i in picks:
        true_p = frames_by_idx[i][k - 2]
        mse_true = float(((gen_penult[i] - true_p) ** 2).mean())
        mses.append(mse_true)
        if partner[i] == i:
            continue
        other_p = frames_by_idx[partner[i]][k - 2]
        mse_other = float(((gen_penult[i] - other_p) ** 2).mean())
        judged += 1
        if mse_true < mse_other:
            wins += 1
    result = {
        "tail_mse": float(np.mean(mses)),
        "paired_win_rate": wins / judged if judged else 0.0,
        "n": len(picks),
    }
    log(f"recraft: tail mse {result['tail_mse']:.5f}, "
        f"paired win rate {result['paired_win_rate']:.2f} over {judged} pairs")
    return result


def eval_task_losses(params, cfg: Config, lora: lora_mod.LoraSet | None,
                     data_dir, n_per_task: int = 16, seed: int = 0,
                     log=print) -> dict:
    """Flow-matching loss per task on fixed held-out batches and draws,
    comparable across checkpoints and adapter designs."""
    from psdt.train import load_training_arrays
    _, (x_val, tid_val), _ = load_training_arrays(cfg, data_dir)
    out = {}
    for tid, name in enumerate(cfg.data.task_names):
        x = x_val[tid_val == tid][:n_per_task]
        if x.shape[0] == 0:
            raise ValueError(f"no held-out samples for task {name}")
        ids = np.full(x.shape[0], tid)
        adapters = None
        if lora is not None:
            route = ids if lora.n_tasks > 1 else np.zeros_like(ids)
            adapters = lora_mod.LoraRuntime(lora, task_ids=route)
        fn = velocity_fn(params, cfg.model, adapters)
        d = np.random.default_rng([seed, 30, tid])
        t = d.uniform(0.0, 1.0, size=x.shape[0])
        eps = d.standard_normal(x.shape).astype(x.dtype)
        out[name] = float(flow.cfm_loss_given(fn, x, ids, t, eps).item())
        log(f"task {name}: held-out flow loss {out[name]:.5f}")
    return out


def build_report(cfg: Config, tasks: dict, recraft: dict | None,
                 seed: int) -> dict:
    order = serpentine_order(*cfg.data.manifest().grid)
    return {
        "tasks": tasks,
        "recraft": recraft,
        "config": config_to_dict(cfg, include_paths=False),
        "seeds": {"eval": seed},
        "serpentine_order": [list(c) for c in order.cells],
    }


def write_report(path, report: dict) -> None:
    for key, val in report["tasks"].items():
        for k, v in val.items():
            if isinstance(v, float) and not np.isfinite(v):
                raise ValueError(f"non-finite report value tasks.{key}.{k}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
