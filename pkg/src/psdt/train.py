"""Two-stage training orchestration and checkpoint state packing.

Stage 1 trains on text(task)-conditioned grids: optionally a brief
full-parameter pretrain, then the base is frozen and the asymmetric LoRA
trains with per-sample task routing ("lora" mode), or the whole model
trains with no adapters ("full" mode). Stage 2 starts from a merged base
and trains a fresh LoRA under masked noising/loss (tail-frame conditioning).

Seed discipline: separate deterministic streams derive from the config seed
for param init, adapter init, and the training draw stream, so resuming a
checkpoint reproduces the exact loss trajectory.
"""

from __future__ import annotations

import math

import numpy as np

from psdt import flow, lora as lora_mod, recraft as recraft_mod
from psdt import tensor as T
from psdt.checkpoint import load_checkpoint, save_checkpoint
from psdt.config import Config, config_from_dict, config_to_dict
from psdt.model import ConfigError, ModelConfig, model_forward, init_params
from psdt.optim import Adam
from psdt.synthdata import load_dataset
from psdt.tensor import NumericsError, Parameter, Tape, Tensor


def to_model_space(x01: np.ndarray) -> np.ndarray:
    """[0,1] pixel values -> [-1,1] model values."""
    return 2.0 * np.asarray(x01) - 1.0


def to_unit_interval(z: np.ndarray) -> np.ndarray:
    """Model values -> [0,1] pixels (clipped)."""
    return np.clip((np.asarray(z) + 1.0) / 2.0, 0.0, 1.0)


def velocity_fn(params: dict[str, Tensor], cfg: ModelConfig, adapters=None):
    """Bind params/config (and optional adapters) into the model signature
    used by the flow/recraft losses and samplers."""

    def fn(z, t, task_ids, condition_tokens=None):
        return model_forward(params, cfg, z, t, task_ids, adapters=adapters,
                             condition_tokens=condition_tokens)

    return fn


def _np_dtype(name: str):
    return np.float64 if name == "float64" else np.float32


# ---------------------------------------------------------------------------
# checkpoint state packing
# ---------------------------------------------------------------------------

def pack_state(cfg: Config, params: dict[str, Tensor],
               lora: lora_mod.LoraSet | None, opt, rng: np.random.Generator,
               step: int, stage: str) -> tuple[dict, dict]:
    tensors: dict[str, np.ndarray] = {}
    for name, p in params.items():
        tensors[f"model.{name}"] = p.data
    lora_meta = None
    if lora is not None:
        for target, ad in lora.adapters.items():
            tensors[f"lora.{target}.A"] = ad.a.data
            for i in range(ad.n_tasks):
                tensors[f"lora.{target}.B.{i}"] = ad.b_stack.data[i]
        lora_meta = {"rank": lora.rank, "tasks": list(lora.task_names),
                     "targets": list(lora.targets)}
    opt_t = 0
    if opt is not None:
        tensors.update(opt.state_tensors())
        opt_t = opt.t
    meta = {
        "stage": stage,
        "step": int(step),
        "config": config_to_dict(cfg),
        "rng_state": rng.bit_generator.state,
        "opt_t": opt_t,
        "lora": lora_meta,
    }
    return tensors, meta


def unpack_params(tensors: dict[str, np.ndarray]) -> dict[str, Parameter]:
    return {name[len("model."):]: Parameter(name[len("model."):], arr.copy())
            for name, arr in tensors.items() if name.startswith("model.")}


def unpack_lora(tensors: dict[str, np.ndarray], meta: dict) -> lora_mod.LoraSet | None:
    info = meta.get("lora")
    if not info:
        return None
    adapters: dict[str, lora_mod.AsymLora] = {}
    targets = sorted({name[len("lora."):-2] for name in tensors
                      if name.startswith("lora.") and name.endswith(".A")})
    for target in targets:
        a = T.tensor(tensors[f"lora.{target}.A"].copy(), requires_grad=True)
        bs = [tensors[f"lora.{target}.B.{i}"] for i in range(len(info["tasks"]))]
        b = T.tensor(np.stack(bs), requires_grad=True)
        adapters[target] = lora_mod.AsymLora(target=target, a=a, b_stack=b,
                                             rank=info["rank"])
    return lora_mod.LoraSet(adapters=adapters, task_names=tuple(info["tasks"]),
                            rank=info["rank"], targets=tuple(info["targets"]))


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def load_run_checkpoint(path):
    """(params, lora_set, tensors, meta, cfg) from a training checkpoint."""
    tensors, meta = load_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    return unpack_params(tensors), unpack_lora(tensors, meta), tensors, meta, cfg


# ---------------------------------------------------------------------------
# dataset plumbing
# ---------------------------------------------------------------------------

def load_training_arrays(cfg: Config, data_dir):
    """Dataset grids in model space, split into train/val, geometry-checked."""
    index, grids, task_ids, splits = load_dataset(data_dir)
    rows, cols = cfg.data.manifest().grid
    if index["grid"] != [rows, cols] or index["frame_size"] != cfg.model.frame_size:
        raise ConfigError(
            f"dataset geometry {index['grid']}/f={index['frame_size']} does not match "
            f"config {[rows, cols]}/f={cfg.model.frame_size}")
    if tuple(index["task_names"]) != cfg.data.task_names:
        raise ConfigError(
            f"dataset tasks {tuple(index['task_names'])} != config tasks {cfg.data.task_names}")
    dtype = _np_dtype(cfg.train.dtype)
    x = to_model_space(grids).astype(dtype)[:, None]   # (n, 1, H, W)
    train = splits == "train"
    return (x[train], task_ids[train]), (x[~train], task_ids[~train]), index


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _lr_factor(schedule: str, step: int, start: int, end: int) -> float:
    """Schedule factor over the current phase; cosine restarts per phase."""
    if schedule == "cosine":
        span = max(end - start, 1)
        return 0.5 * (1.0 + math.cos(math.pi * (step - start) / span))
    return 1.0


def _nan_guard(loss_value: float, step: int) -> None:
    if not np.isfinite(loss_value):
        raise NumericsError(f"non-finite loss at step {step}")


def train_stage1(cfg: Config, data_dir, ckpt_path, resume=None, log=print) -> dict:
    """Run (or resume) stage-1 training; returns a summary dict."""
    (x_train, tid_train), _, _ = load_training_arrays(cfg, data_dir)
    n_train = x_train.shape[0]
    tc = cfg.train
    dtype = _np_dtype(tc.dtype)
    pretrain_until = tc.base_pretrain_steps if tc.mode == "lora" else tc.steps

    if resume is not None:
        params, lora, tensors, meta, ckpt_cfg = load_run_checkpoint(resume)
        if meta["stage"] != "stage1":
            raise ConfigError(f"cannot resume stage1 from a {meta['stage']!r} checkpoint")
        rng = restore_rng(meta["rng_state"])
        start_step = meta["step"]
        if lora is not None:
            lora_mod.freeze(params)
            trainable = lora_mod.lora_params(lora)
            phase_lr = tc.effective_lora_lr
        else:
            trainable = {f"model.{n}": p for n, p in params.items()}
            phase_lr = tc.lr
        opt = Adam(trainable, lr=phase_lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
        opt.load_state(tensors, meta["opt_t"])
    else:
        params = init_params(cfg.model, np.random.default_rng([tc.seed, 0]), dtype=dtype)
        lora = None
        rng = np.random.default_rng([tc.seed, 2])
        start_step = 0
        opt = Adam({f"model.{n}": p for n, p in params.items()},
                   lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)

    if (tc.mode == "lora" and pretrain_until == 0 and resume is None
            and tc.steps > 0):
        log("warning: adapters will train against a frozen randomly "
            "initialized base (base_pretrain_steps=0); expect no learning. "
            "Set train.base_pretrain_steps > 0 or train.mode='full'.")

    summary = {"losses": [], "step0_loss": None, "step0_oracle": None}
    for step in range(start_step, tc.steps):
        if tc.mode == "lora" and step >= pretrain_until and lora is None:
            lora_mod.freeze(params)
            lora_tasks = ("shared",) if cfg.lora.single_b else cfg.data.task_names
            lora = lora_mod.init_lora(params, lora_tasks, cfg.lora.rank,
                                      np.random.default_rng([tc.seed, 1]),
                                      patterns=cfg.lora.targets, dtype=dtype)
            opt = Adam(lora_mod.lora_params(lora), lr=tc.effective_lora_lr,
                       beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
            log(f"step {step}: base frozen, training asymmetric LoRA "
                f"(rank {cfg.lora.rank}, {len(lora.adapters)} targets)")

        idx = rng.integers(0, n_train, size=tc.batch)
        bx, btid = x_train[idx], tid_train[idx]
        adapters = None
        if lora is not None:
            route = np.zeros_like(btid) if lora.n_tasks == 1 else btid
            adapters = lora_mod.LoraRuntime(lora, task_ids=route)
        fn = velocity_fn(params, cfg.model, adapters)

        with Tape() as tape:
            loss = flow.cfm_loss(fn, bx, btid, rng, t_dist=cfg.flow.t_dist)
            loss_value = loss.item()
            _nan_guard(loss_value, step)
            tape.backward(loss)
            grads = {name: tape.grad(p) for name, p in opt.params.items()}
        if lora is not None:
            base_lr = tc.effective_lora_lr
            phase = (pretrain_until, tc.steps)
        else:
            base_lr = tc.lr
            phase = (0, pretrain_until if tc.mode == "lora" else tc.steps)
        opt.lr = base_lr * _lr_factor(tc.lr_schedule, step, *phase)
        opt.step(grads)

        summary["losses"].append(loss_value)
        if step == 0:
            summary["step0_loss"] = loss_value
            summary["step0_oracle"] = flow.zero_model_loss_oracle(bx)
        if tc.log_every and step % tc.log_every == 0:
            log(f"step {step}: loss {loss_value:.5f}")
        if tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
            tensors, meta = pack_state(cfg, params, lora, opt, rng, step + 1, "stage1")
            save_checkpoint(ckpt_path, tensors, meta)

    tensors, meta = pack_state(cfg, params, lora, opt, rng, tc.steps, "stage1")
    save_checkpoint(ckpt_path, tensors, meta)
    summary["ckpt"] = str(ckpt_path)
    return summary


def train_recraft(cfg: Config, base_params: dict[str, Tensor], data_dir,
                  ckpt_path, resume=None, log=print) -> dict:
    """Stage-2 training: frozen merged base plus a fresh LoRA under masked
    tail-frame conditioning."""
    (x_train, tid_train), _, _ = load_training_arrays(cfg, data_dir)
    n_train = x_train.shape[0]
    tc = cfg.train
    dtype = _np_dtype(tc.dtype)
    mask = recraft_mod.build_condition_mask(cfg.model)

    params = {}
    for n, p in base_params.items():
        param = Parameter(n, p.data.astype(dtype, copy=True))
        param.requires_grad = False
        params[n] = param
    if resume is not None:
        r_params, lora, tensors, meta, _ = load_run_checkpoint(resume)
        if meta["stage"] != "recraft" or lora is None:
            raise ConfigError("recraft resume needs a recraft checkpoint with adapters")
        params = r_params
        lora_mod.freeze(params)
        rng = restore_rng(meta["rng_state"])
        start_step = meta["step"]
        opt = Adam(lora_mod.lora_params(lora), lr=tc.recraft_lr,
                   beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
        opt.load_state(tensors, meta["opt_t"])
    else:
        lora_tasks = ("shared",) if cfg.lora.single_b else cfg.data.task_names
        lora = lora_mod.init_lora(params, lora_tasks, cfg.lora.rank,
                                  np.random.default_rng([tc.seed, 3]),
                                  patterns=cfg.lora.targets, dtype=dtype)
        rng = np.random.default_rng([tc.seed, 4])
        start_step = 0
        opt = Adam(lora_mod.lora_params(lora), lr=tc.recraft_lr,
                   beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)

    summary = {"losses": []}
    for step in range(start_step, tc.recraft_steps):
        idx = rng.integers(0, n_train, size=tc.batch)
        bx, btid = x_train[idx], tid_train[idx]
        route = np.zeros_like(btid) if lora.n_tasks == 1 else btid
        adapters = lora_mod.LoraRuntime(lora, task_ids=route)
        fn = velocity_fn(params, cfg.model, adapters)

        with Tape() as tape:
            loss = recraft_mod.recraft_loss(fn, bx, btid, mask, rng,
                                            t_dist=cfg.flow.t_dist)
            loss_value = loss.item()
            _nan_guard(loss_value, step)
            tape.backward(loss)
            grads = {name: tape.grad(p) for name, p in opt.params.items()}
        opt.lr = tc.recraft_lr * _lr_factor(tc.lr_schedule, step, 0, tc.recraft_steps)
        opt.step(grads)

        summary["losses"].append(loss_value)
        if tc.log_every and step % tc.log_every == 0:
            log(f"recraft step {step}: loss {loss_value:.5f}")
        if tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
            tensors, meta = pack_state(cfg, params, lora, opt, rng, step + 1, "recraft")
            save_checkpoint(ckpt_path, tensors, meta)

    tensors, meta = pack_state(cfg, params, lora, opt, rng, tc.recraft_steps, "recraft")
    save_checkpoint(ckpt_path, tensors, meta)
    summary["ckpt"] = str(ckpt_path)
    return summary
