"""Clean-token image conditioning: the tail frame of a sequence stays
un-noised in its own grid cell and steers the denoising of every other
frame through attention; the loss and the sampler never touch it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from psdt import flow
from psdt import tensor as T
from psdt.layout import cell_token_positions, decompose, serpentine_order
from psdt.model import ModelConfig
from psdt.tensor import Tensor


@dataclass(frozen=True)
class ConditionMask:
    """Token- and pixel-level views of the clean condition region."""
    cell: tuple[int, int]
    token_mask: np.ndarray     # (N,) bool over image tokens, True = condition
    pixel_mask: np.ndarray     # (1, H, W) bool, True = condition pixels

    @property
    def n_condition_tokens(self) -> int:
        return int(self.token_mask.sum())


def build_condition_mask(cfg: ModelConfig) -> ConditionMask:
    """Mark the last cell in serpentine order (the tail frame) as clean."""
    order = serpentine_order(cfg.grid_rows, cfg.grid_cols)
    cell = order.cells[-1]
    token_mask = np.zeros(cfg.n_image_tokens, dtype=bool)
    for (i, j) in cell_token_positions(cell, cfg.frame_size, cfg.patch_size):
        token_mask[i * cfg.patch_cols + j] = True
    pixel_mask = np.zeros((1, cfg.image_height, cfg.image_width), dtype=bool)
    r, c = cell
    f = cfg.frame_size
    pixel_mask[:, r * f:(r + 1) * f, c * f:(c + 1) * f] = True
    return ConditionMask(cell=cell, token_mask=token_mask, pixel_mask=pixel_mask)


def masked_noising(x0: np.ndarray, eps: np.ndarray, t,
                   mask: ConditionMask) -> np.ndarray:
    """Interpolate toward noise everywhere except the condition region,
    which stays bit-identical to x0."""
    z = flow.interpolate(x0, eps, t)
    cond = np.broadcast_to(mask.pixel_mask, x0.shape)
    z[cond] = x0[cond]
    return z


def recraft_loss_given(model_fn, x0: np.ndarray, task_ids: np.ndarray,
                       mask: ConditionMask, t: np.ndarray,
                       eps: np.ndarray) -> Tensor:
    """Flow-matching MSE over non-condition image elements only; the model
    still attends over the full [z; c_I; c_T] sequence."""
    z_t = masked_noising(x0, eps, t, mask)
    u = flow.target_velocity(x0, eps)
    v = model_fn(z_t, t, task_ids, condition_tokens=mask.token_mask)
    keep = (~np.broadcast_to(mask.pixel_mask, x0.shape)).astype(v.dtype)
    n_kept = int(keep.sum())
    diff = T.mul(T.sub(v, T.tensor(u.astype(v.dtype, copy=False))), T.tensor(keep))
    return T.scale(T.tsum(T.mul(diff, diff)), 1.0 / n_kept)


def recraft_loss(model_fn, x0: np.ndarray, task_ids: np.ndarray,
                 mask: ConditionMask, rng: np.random.Generator,
                 t_dist: str = "uniform") -> Tensor:
    x0 = np.asarray(x0)
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    t = flow.sample_timesteps(rng, x0.shape[0], t_dist)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    return recraft_loss_given(model_fn, x0, task_ids, mask, t, eps)


def recraft_sample(model_fn, cfg: ModelConfig, tail_frame: np.ndarray,
                   task_ids: np.ndarray, mask: ConditionMask, steps: int,
                   rng: np.random.Generator, batch: int = 1):
    """Generate full sequences from a clean tail frame.

    Returns (frames, grids): frames is a list over batch of K (f, f) arrays
    in serpentine order, grids the (B, C, H, W) final states. The condition
    cell of the output is bit-identical to the input tail frame.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    tail = np.asarray(tail_frame, dtype=np.float64)
    if tail.ndim == 2:
        tail = tail[None, None]
    elif tail.ndim == 3:
        tail = tail[None]
    if tail.shape[0] == 1 and batch > 1:
        tail = np.broadcast_to(tail, (batch,) + tail.shape[1:])
    b = tail.shape[0]
    if tail.shape[-2:] != (cfg.frame_size, cfg.frame_size):
        raise ValueError(f"tail frame {tail.shape[-2:]} != frame size {cfg.frame_size}")

    shape = (b, cfg.channels, cfg.image_height, cfg.image_width)
    cond = np.broadcast_to(mask.pixel_mask, shape)
    r, c = mask.cell
    f = cfg.frame_size
    clean = np.zeros(shape)
    clean[:, :, r * f:(r + 1) * f, c * f:(c + 1) * f] = tail

    z = rng.standard_normal(shape)
    z[cond] = clean[cond]
    dt = 1.0 / steps
    task_ids = np.asarray(task_ids, dtype=np.int64).reshape(-1)
    for k in range(steps, 0, -1):
        t = np.full(b, k / steps)
        v = model_fn(z, t, task_ids, condition_tokens=mask.token_mask)
        vd = v.data if isinstance(v, Tensor) else np.asarray(v)
        z = z - dt * vd
        z[cond] = clean[cond]
        if not np.all(np.isfinite(z)):
            raise flow.DivergenceError(steps - k + 1)

    order = serpentine_order(cfg.grid_rows, cfg.grid_cols)
    frames = [decompose(z[i, 0], order) for i in range(b)]
    return frames, z
