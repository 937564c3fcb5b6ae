"""Adam with a linear warm-up to a constant learning rate."""

from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np

from backend.autodiff.nn import Parameter


class Adam:
    def __init__(
        self,
        named_params: List[Tuple[str, Parameter]],
        lr: float = 8e-5,
        warmup_steps: int = 3000,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.named_params = list(named_params)
        self.base_lr = lr
        self.warmup_steps = warmup_steps
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {n: np.zeros(p.shape) for n, p in self.named_params}
        self.v: Dict[str, np.ndarray] = {n: np.zeros(p.shape) for n, p in self.named_params}

    def lr_at(self, step: int) -> float:
        """Learning rate used for optimizer step ``step`` (0-based)."""
        if self.warmup_steps <= 0:
            return self.base_lr
        return self.base_lr * min(1.0, (step + 1) / self.warmup_steps)

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def step(self) -> float:
        lr = self.lr_at(self.t)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.assign(p.data - update)
        return lr

    def state_dict(self) -> Dict[str, np.ndarray]:
        state: Dict[str, np.ndarray] = {"t": np.array([float(self.t)])}
        for name in self.m:
            state[f"m.{name}"] = self.m[name]
            state[f"v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.t = int(state["t"].reshape(-1)[0])
        for name in self.m:
            self.m[name] = np.array(state[f"m.{name}"], dtype=np.float64)
            self.v[name] = np.array(state[f"v.{name}"], dtype=np.float64)
