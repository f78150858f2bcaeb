"""Asymmetric low-rank adaptation.

One shared down-projection A per target weight, plus one up-projection B_i
per task; the effective weight is W0 + sum_i omega_i * B_i A. Training
routes gradients so A learns from every sample while B_i learns only from
samples of task i; the base weight stays frozen. Merging folds the weighted
delta into W0 and leaves no adapter state behind.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass

import numpy as np

from psdt import tensor as T
from psdt.tensor import Parameter, Tensor

DEFAULT_TARGETS = (
    "blocks.*.attn.wq.weight",
    "blocks.*.attn.wk.weight",
    "blocks.*.attn.wv.weight",
    "blocks.*.attn.wo.weight",
    "blocks.*.mlp.fc1.weight",
    "blocks.*.mlp.fc2.weight",
)


@dataclass
class AsymLora:
    """Adapter for one target weight W0 of shape (d_out, k)."""
    target: str
    a: Tensor                  # (r, k), shared across tasks
    b_stack: Tensor            # (n_tasks, d_out, r), zero-init
    rank: int

    @property
    def n_tasks(self) -> int:
        return self.b_stack.shape[0]

    @property
    def b(self) -> list[np.ndarray]:
        return [self.b_stack.data[i] for i in range(self.n_tasks)]


@dataclass
class LoraSet:
    """All adapters of a model plus the task-name list they index."""
    adapters: dict[str, AsymLora]
    task_names: tuple[str, ...]
    rank: int
    targets: tuple[str, ...]

    @property
    def n_tasks(self) -> int:
        return len(self.task_names)


def resolve_targets(param_names, patterns) -> list[str]:
    """Expand target patterns against parameter names; every pattern must
    match at least one parameter."""
    names = list(param_names)
    resolved: list[str] = []
    for pat in patterns:
        hits = fnmatch.filter(names, pat)
        if not hits:
            raise KeyError(f"LoRA target pattern {pat!r} matches no parameter")
        resolved.extend(h for h in hits if h not in resolved)
    return resolved


def init_lora(params: dict[str, Tensor], task_names, rank: int,
              rng: np.random.Generator, patterns=DEFAULT_TARGETS,
              dtype=None) -> LoraSet:
    """A ~ Gaussian(0, 1/r) (variance 1/r), B_i = 0: training starts exactly
    at the base model."""
    task_names = tuple(task_names)
    adapters: dict[str, AsymLora] = {}
    std = 1.0 / np.sqrt(rank)
    for name in resolve_targets(params.keys(), patterns):
        w0 = params[name]
        if dtype is None:
            dtype = w0.dtype
        d_out, k = w0.shape
        a = T.tensor(rng.normal(0.0, std, size=(rank, k)).astype(dtype), requires_grad=True)
        b = T.tensor(np.zeros((len(task_names), d_out, rank), dtype=dtype), requires_grad=True)
        adapters[name] = AsymLora(target=name, a=a, b_stack=b, rank=rank)
    return LoraSet(adapters=adapters, task_names=task_names, rank=rank,
                   targets=tuple(patterns))


def lora_params(lora: LoraSet) -> dict[str, Tensor]:
    """Trainable adapter tensors keyed by dotted names (for the optimizer
    and for checkpoints; B stacks are split per task on save)."""
    out: dict[str, Tensor] = {}
    for name, ad in lora.adapters.items():
        out[f"lora.{name}.A"] = ad.a
        out[f"lora.{name}.B"] = ad.b_stack
    return out


def lora_delta(adapter: AsymLora, omega) -> Tensor:
    """sum_i omega_i * B_i A as a dense (d_out, k) tensor."""
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (adapter.n_tasks,):
        raise ValueError(
            f"omega length {omega.shape} != {adapter.n_tasks} tasks of {adapter.target}")
    bd = adapter.b_stack.data.astype(np.float64, copy=False)
    ad = adapter.a.data.astype(np.float64, copy=False)
    b_eff = np.einsum("t,tdr->dr", omega, bd)
    return T.tensor((b_eff @ ad).astype(adapter.a.dtype, copy=False))


def apply_runtime(x, w0: Tensor, adapter: AsymLora, omega) -> Tensor:
    """W0 x + sum_i omega_i B_i (A x), keeping the low-rank path factored."""
    if not isinstance(x, Tensor):
        x = T.tensor(np.asarray(x, dtype=w0.dtype))
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (adapter.n_tasks,):
        raise ValueError(f"omega length {omega.shape[0]} != {adapter.n_tasks} tasks")
    out = T.linear(x, w0)
    if not np.any(omega):
        return out
    b_eff = np.einsum("t,tdr->dr", omega, adapter.b_stack.data.astype(np.float64))
    z = T.linear(x, adapter.a)
    return T.add(out, T.linear(z, T.tensor(b_eff.astype(x.dtype, copy=False))))


def merge(params: dict[str, Tensor], lora: LoraSet, omega) -> dict[str, Tensor]:
    """New parameter dict with W0 + sum_i omega_i B_i A folded in per target;
    the result carries no adapter state."""
    omega = np.asarray(omega, dtype=np.float64)
    merged: dict[str, Tensor] = {}
    for name, p in params.items():
        merged[name] = Parameter(name, p.data.copy())
    for name, ad in lora.adapters.items():
        if name not in merged:
            raise KeyError(f"LoRA target {name!r} not present in model parameters")
        delta = lora_delta(ad, omega).data.astype(merged[name].dtype, copy=False)
        merged[name] = Parameter(name, merged[name].data + delta)
    return merged


class LoraRuntime:
    """Adapter hook handed to the model forward.

    Exactly one of ``task_ids`` (per-sample routing with implicit one-hot
    weights, used for training) or ``omega`` (a fixed mixture over tasks,
    used at inference) is active.
    """

    def __init__(self, lora: LoraSet, task_ids: np.ndarray | None = None,
                 omega=None):
        if (task_ids is None) == (omega is None):
            raise ValueError("specify exactly one of task_ids or omega")
        self.lora = lora
        self.task_ids = None if task_ids is None else np.asarray(task_ids, dtype=np.int64)
        self.omega = None if omega is None else np.asarray(omega, dtype=np.float64)
        if self.omega is not None and self.omega.shape != (lora.n_tasks,):
            raise ValueError(f"omega length {self.omega.shape} != {lora.n_tasks} tasks")

    def delta(self, name: str, x: Tensor) -> Tensor | None:
        ad = self.lora.adapters.get(name)
        if ad is None:
            return None
        z = T.linear(x, ad.a)
        if self.task_ids is not None:
            return T.task_linear(z, ad.b_stack, self.task_ids)
        b_eff = np.einsum("t,tdr->dr", self.omega,
                          ad.b_stack.data.astype(np.float64))
        return T.linear(z, T.tensor(b_eff.astype(x.dtype, copy=False)))


def one_hot_omega(task_id: int, n_tasks: int) -> np.ndarray:
    w = np.zeros(n_tasks)
    w[task_id] = 1.0
    return w


def freeze(params: dict[str, Tensor]) -> None:
    """Mark base parameters non-differentiable (zero grads by construction)."""
    for p in params.values():
        p.requires_grad = False
