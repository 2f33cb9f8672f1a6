"""Adam optimizer over name-keyed parameter dictionaries."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    """Standard Adam with bias correction; betas (0.9, 0.999), eps 1e-8."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Moment estimates and step counter, for checkpointing."""
        out: dict[str, np.ndarray] = {"optim.step": np.asarray(float(self.step_count))}
        for name in self.params:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        if "optim.step" in tensors:
            self.step_count = int(round(float(tensors["optim.step"])))
        for name in self.params:
            mk, vk = f"optim.m.{name}", f"optim.v.{name}"
            if mk in tensors:
                self.m[name] = np.asarray(tensors[mk], dtype=np.float64).reshape(
                    self.m[name].shape)
            if vk in tensors:
                self.v[name] = np.asarray(tensors[vk], dtype=np.float64).reshape(
                    self.v[name].shape)
