"""Adam optimizer over named parameter dicts, with checkpointable state."""

from __future__ import annotations

import numpy as np

from psdt import kernels
from psdt.tensor import Tensor


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = np.ascontiguousarray(grads[name], dtype=p.dtype)
            kernels.adam_step(p.data.reshape(-1), g.reshape(-1),
                              self.m[name].reshape(-1), self.v[name].reshape(-1),
                              self.lr, self.beta1, self.beta2, self.eps, bc1, bc2)

    def state_tensors(self, prefix: str = "opt") -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int,
                   prefix: str = "opt") -> None:
        self.t = int(t)
        for name in self.params:
            self.m[name] = np.ascontiguousarray(tensors[f"{prefix}.m.{name}"])
            self.v[name] = np.ascontiguousarray(tensors[f"{prefix}.v.{name}"])
