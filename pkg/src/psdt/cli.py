"""Command-line pipeline: gen-data, train, merge-lora, sample,
train-recraft, recraft, eval, grad-check.

Exit codes: 0 ok, 1 usage, 2 data/config error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from psdt import evaluate, flow, lora as lora_mod, pgm, recraft as recraft_mod
from psdt.checkpoint import CheckpointError, save_checkpoint
from psdt.config import Config, apply_overrides, config_from_dict
from psdt.gradcheck import run_suite
from psdt.layout import decompose, serpentine_order
from psdt.model import ConfigError, VocabularyError, param_shapes
from psdt.synthdata import gen_dataset
from psdt.tensor import NumericsError
from psdt.train import (load_run_checkpoint, pack_state, restore_rng,
                        to_model_space, to_unit_interval, train_recraft,
                        train_stage1, velocity_fn)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_cfg(args) -> Config:
    payload = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        payload = json.loads(path.read_text())
    apply_overrides(payload, getattr(args, "set", None))
    return config_from_dict(payload)


def _resolve_task(task: str, task_names) -> int:
    names = list(task_names)
    if task in names:
        return names.index(task)
    try:
        tid = int(task)
    except ValueError:
        raise VocabularyError(f"unknown task {task!r}; known: {names}") from None
    if not 0 <= tid < len(names):
        raise VocabularyError(f"task id {tid} out of range 0..{len(names) - 1}")
    return tid


def _parse_omega(spec: str, n_tasks: int) -> np.ndarray:
    if spec == "uniform":
        return np.full(n_tasks, 1.0 / n_tasks)
    omega = np.zeros(n_tasks)
    for part in spec.split(","):
        if ":" not in part:
            raise UsageError(f"omega spec entry {part!r} is not task:weight")
        tid_s, w_s = part.split(":", 1)
        tid = int(tid_s)
        if not 0 <= tid < n_tasks:
            raise VocabularyError(f"omega task id {tid} out of range 0..{n_tasks - 1}")
        omega[tid] = float(w_s)
    return omega


def _write_frames(out_dir, grid_unit: np.ndarray, order) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = decompose(grid_unit, order)
    for i, fr in enumerate(frames):
        pgm.write_pgm(out / f"frame_{i}.pgm", fr)
    pgm.write_pgm(out / "grid.pgm", grid_unit)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    index = gen_dataset(cfg.data.manifest(), cfg.paths.data_dir)
    for task, count in index["counts"].items():
        print(f"{task}: {count} samples")
    print(f"total: {len(index['samples'])} grids -> {cfg.paths.data_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    ckpt = Path(cfg.paths.run_dir) / "stage1.ckpt"
    summary = train_stage1(cfg, cfg.paths.data_dir, ckpt, resume=args.resume)
    losses = summary["losses"]
    if losses:
        print(f"step-0 loss {summary['step0_loss'] if summary['step0_loss'] is not None else 'n/a'}"
              f" final loss {losses[-1]:.5f}")
    print(f"checkpoint: {summary['ckpt']}")
    return EXIT_OK


def cmd_merge_lora(args) -> int:
    params, lora, tensors, meta, cfg = load_run_checkpoint(args.ckpt)
    if lora is None:
        raise ConfigError(f"{args.ckpt}: checkpoint carries no adapters to merge")
    omega = _parse_omega(args.tasks, lora.n_tasks)
    merged = lora_mod.merge(params, lora, omega)
    rng = restore_rng(meta["rng_state"])
    out_tensors, out_meta = pack_state(cfg, merged, None, None, rng,
                                       meta["step"], "merged")
    out_meta["merge_omega"] = [float(w) for w in omega]
    save_checkpoint(args.out, out_tensors, out_meta)
    print(f"merged {len(lora.adapters)} adapters with omega "
          f"{[round(float(w), 6) for w in omega]} -> {args.out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    params, lora, _, meta, cfg = load_run_checkpoint(args.ckpt)
    tid = _resolve_task(args.task, cfg.data.task_names)
    steps = args.steps or cfg.flow.steps
    adapters = None
    if lora is not None:
        adapters = lora_mod.LoraRuntime(lora, omega=lora_mod.one_hot_omega(tid, lora.n_tasks))
    fn = velocity_fn(params, cfg.model, adapters)
    rng = np.random.default_rng(args.seed)
    shape = (1, cfg.model.channels, cfg.model.image_height, cfg.model.image_width)
    grid = flow.euler_sample(lambda z, t: fn(z, t, np.array([tid])), shape, steps, rng)
    order = serpentine_order(cfg.model.grid_rows, cfg.model.grid_cols)
    _write_frames(args.out, to_unit_interval(grid[0, 0]), order)
    print(f"wrote {len(order)} frames + grid to {args.out}")
    return EXIT_OK


def cmd_train_recraft(args) -> int:
    cfg = _load_cfg(args)
    base_params, base_lora, _, base_meta, base_cfg = load_run_checkpoint(args.base)
    if base_lora is not None:
        raise ConfigError(
            f"{args.base}: stage-2 base must be a merged checkpoint (run merge-lora first)")
    expected = param_shapes(cfg.model)
    got = {n: p.shape for n, p in base_params.items()}
    if {n: tuple(s) for n, s in expected.items()} != got:
        raise ConfigError("base checkpoint parameters do not match the configured model")
    ckpt = Path(cfg.paths.run_dir) / "recraft.ckpt"
    summary = train_recraft(cfg, base_params, cfg.paths.data_dir, ckpt,
                            resume=args.resume)
    print(f"final recraft loss {summary['losses'][-1]:.5f}" if summary["losses"]
          else "no steps run")
    print(f"checkpoint: {summary['ckpt']}")
    return EXIT_OK


def cmd_recraft(args) -> int:
    params, lora, _, meta, cfg = load_run_checkpoint(args.ckpt)
    if meta.get("stage") != "recraft":
        raise ConfigError(f"{args.ckpt}: not a recraft checkpoint")
    tid = _resolve_task(args.task, cfg.data.task_names)
    tail = pgm.read_pgm(args.image)
    f = cfg.model.frame_size
    if tail.shape != (f, f):
        raise ConfigError(f"tail frame {tail.shape} != model frame size ({f}, {f})")
    adapters = None
    if lora is not None:
        adapters = lora_mod.LoraRuntime(lora, omega=lora_mod.one_hot_omega(tid, lora.n_tasks))
    fn = velocity_fn(params, cfg.model, adapters)
    mask = recraft_mod.build_condition_mask(cfg.model)
    steps = args.steps or cfg.flow.steps
    rng = np.random.default_rng(args.seed)
    frames, grids = recraft_mod.recraft_sample(
        fn, cfg.model, to_model_space(tail), np.array([tid]), mask, steps, rng)
    order = serpentine_order(cfg.model.grid_rows, cfg.model.grid_cols)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames[0]):
        pgm.write_pgm(out / f"frame_{i}.pgm", to_unit_interval(fr))
    pgm.write_pgm(out / "grid.pgm", to_unit_interval(grids[0, 0]))
    print(f"wrote {len(order)} frames + grid to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.ground_truth:
        if not args.config:
            raise UsageError("--ground-truth needs --config for the dataset location")
        cfg = _load_cfg(args)
        tasks = evaluate.eval_ground_truth(cfg, cfg.paths.data_dir)
        report = evaluate.build_report(cfg, tasks, None, args.seed)
    else:
        if not args.ckpt:
            raise UsageError("eval needs --ckpt (or --ground-truth)")
        params, lora, _, meta, cfg = load_run_checkpoint(args.ckpt)
        tasks = evaluate.eval_generation(params, cfg, lora, n_per_task=args.samples,
                                         seed=args.seed)
        rec = None
        if meta.get("stage") == "recraft":
            rec = evaluate.eval_recraft(params, cfg, lora, cfg.paths.data_dir,
                                        n_samples=args.samples, seed=args.seed)
        report = evaluate.build_report(cfg, tasks, rec, args.seed)
    evaluate.write_report(args.out, report)
    print(f"report -> {args.out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = _load_cfg(args)
    _, ok = run_suite(cfg, seed=args.seed)
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="psdt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, help="generate the synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    p = add("train", cmd_train, help="stage-1 training (asymmetric LoRA)")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    p = add("merge-lora", cmd_merge_lora, help="fold adapters into the base weights")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tasks", default="uniform", metavar="OMEGA",
                   help='"uniform" or "tid:weight,..."')
    p.add_argument("--out", required=True)

    p = add("sample", cmd_sample, help="text(task)-to-sequence generation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("train-recraft", cmd_train_recraft, help="stage-2 tail-conditioned training")
    p.add_argument("--base", required=True, help="merged stage-1 checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    p = add("recraft", cmd_recraft, help="predict the process behind a tail frame")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="tail frame PGM")
    p.add_argument("--task", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, help="monotonicity / tail-consistency report")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ground-truth", action="store_true",
                   help="score the dataset itself, bypassing the model")

    p = add("grad-check", cmd_grad_check, help="64-bit finite-difference suite")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericsError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, VocabularyError, FileNotFoundError,
            KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
