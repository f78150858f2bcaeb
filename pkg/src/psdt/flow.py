"""Rectified-flow noising, the conditional flow matching loss, and the
Euler ODE sampler.

Binding convention for the whole package: z_t = (1-t) x0 + t eps with
u = eps - x0, integrated from t=1 (pure noise) down to t=0 (data).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from psdt import tensor as T
from psdt.tensor import NumericsError, Tensor


class DivergenceError(NumericsError):
    """Non-finite state during ODE integration."""

    def __init__(self, step: int, message: str | None = None):
        super().__init__(message or f"non-finite sampler state at step {step}")
        self.step = step


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"sampler steps must be >= 1, got {self.steps}")


@dataclass(frozen=True)
class FlowSample:
    """One training example on the straight-line path."""
    x0: np.ndarray
    eps: np.ndarray
    t: float
    z_t: np.ndarray
    u_t: np.ndarray


def _t_array(t, batch: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.size == 1:
        t = np.full(batch, t[0])
    if t.shape != (batch,):
        raise ValueError(f"t has shape {t.shape}, expected ({batch},)")
    if t.min() < 0.0 or t.max() > 1.0:
        raise ValueError(f"t must lie in [0, 1], got range [{t.min()}, {t.max()}]")
    return t


def interpolate(x0: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    """z_t = (1-t) x0 + t eps; t scalar or per-sample over the lead axis."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ")
    t = _t_array(t, x0.shape[0])
    tb = t.reshape((-1,) + (1,) * (x0.ndim - 1)).astype(x0.dtype)
    return (1 - tb) * x0 + tb * eps


def target_velocity(x0: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """d/dt of the interpolant: eps - x0, constant in t."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ")
    return eps - x0


def make_flow_sample(x0: np.ndarray, eps: np.ndarray, t: float) -> FlowSample:
    return FlowSample(x0=x0, eps=eps, t=float(t),
                      z_t=interpolate(x0, eps, t),
                      u_t=target_velocity(x0, eps))


def sample_timesteps(rng: np.random.Generator, batch: int,
                     dist: str = "uniform") -> np.ndarray:
    """Per-sample training timesteps; logit-normal available behind config."""
    if dist == "uniform":
        return rng.uniform(0.0, 1.0, size=batch)
    if dist == "logit-normal":
        return 1.0 / (1.0 + np.exp(-rng.normal(0.0, 1.0, size=batch)))
    raise ValueError(f"unknown timestep distribution {dist!r}")


def cfm_loss_given(model_fn, x0: np.ndarray, task_ids: np.ndarray,
                   t: np.ndarray, eps: np.ndarray) -> Tensor:
    """Flow-matching MSE for fixed draws: ||v(z_t, t, c) - (eps - x0)||^2
    averaged over every image element."""
    z_t = interpolate(x0, eps, t)
    u = target_velocity(x0, eps)
    v = model_fn(z_t, t, task_ids)
    return T.mse(v, T.tensor(u.astype(v.dtype, copy=False)))


def cfm_loss(model_fn, x0: np.ndarray, task_ids: np.ndarray,
             rng: np.random.Generator, t_dist: str = "uniform") -> Tensor:
    """Draw t ~ dist and eps ~ N(0,1) per sample, then the matching loss.
    Deterministic given the rng state."""
    x0 = np.asarray(x0)
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    t = sample_timesteps(rng, x0.shape[0], t_dist)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    return cfm_loss_given(model_fn, x0, task_ids, t, eps)


def zero_model_loss_oracle(x0: np.ndarray) -> float:
    """Closed-form E_eps ||eps - x0||^2 / numel = mean(1 + x0^2): the exact
    expected loss of a model that outputs zero."""
    x0 = np.asarray(x0, dtype=np.float64)
    return float(1.0 + (x0 ** 2).mean())


def euler_integrate(velocity_fn, z_init: np.ndarray, steps: int) -> np.ndarray:
    """Integrate dz/dt = v from t=1 to t=0 with fixed Euler steps.

    velocity_fn(z, t_vec) -> ndarray like z. Exact for constant fields at
    any step count. Raises :class:`DivergenceError` naming the step when the
    state stops being finite.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    z = np.array(z_init, copy=True)
    dt = 1.0 / steps
    batch = z.shape[0]
    for k in range(steps, 0, -1):
        t = np.full(batch, k / steps)
        v = np.asarray(velocity_fn(z, t))
        z = z - dt * v
        if not np.all(np.isfinite(z)):
            raise DivergenceError(steps - k + 1)
    return z


def euler_sample(model_fn, shape: tuple[int, ...], steps: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Draw z ~ N(0,1) of the given shape at t=1 and integrate to t=0."""
    noise = rng.standard_normal(shape)
    return euler_integrate(model_fn, noise, steps)
