"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, InputError
from .tensor import Tensor


@dataclass
class AdamW:
    """Adam with decoupled weight decay (``p <- p * (1 - lr * wd)`` before the moment update).

    ``schedule`` is ``"constant"`` or ``"linear"``; linear decays the rate to
    zero over ``total_steps``.
    """

    params: Sequence[Tensor]
    lr: float = 5e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "constant"
    total_steps: int | None = None
    step_count: int = 0
    exp_avg: list[np.ndarray] = field(default_factory=list, repr=False)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list, repr=False)
    param_steps: list[int] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        self.params = list(self.params)
        for p in self.params:
            if not p.requires_grad:
                raise ContractError(f"optimizer given a frozen tensor {p.name or p.shape}")
        if self.schedule not in ("constant", "linear"):
            raise InputError(f"unknown learning-rate schedule {self.schedule!r}")
        if self.schedule == "linear" and not self.total_steps:
            raise InputError("linear schedule needs total_steps")
        self.exp_avg = [np.zeros_like(p.data) for p in self.params]
        self.exp_avg_sq = [np.zeros_like(p.data) for p in self.params]
        self.param_steps = [0] * len(self.params)

    def current_lr(self) -> float:
        if self.schedule == "linear":
            return self.lr * max(0.0, 1.0 - self.step_count / self.total_steps)
        return self.lr

    def step(self, active: Sequence[Tensor] | None = None) -> None:
        """Update every parameter, or only ``active`` ones (the rest keep values and moments).

        Bias correction counts the updates each parameter has received.
        """
        if active is None:
            chosen = range(len(self.params))
        else:
            ids = {id(p) for p in active}
            chosen = [i for i, p in enumerate(self.params) if id(p) in ids]
            if len(chosen) != len(ids):
                raise ContractError("active set contains tensors this optimizer does not own")
        missing = [self.params[i].name or str(self.params[i].shape) for i in chosen if self.params[i].grad is None]
        if missing:
            raise ContractError(f"no gradient for parameters: {', '.join(missing)}")
        lr = self.current_lr()
        self.step_count += 1
        beta1, beta2 = self.betas
        for i in chosen:
            p, m, v = self.params[i], self.exp_avg[i], self.exp_avg_sq[i]
            self.param_steps[i] += 1
            bias1 = 1.0 - beta1 ** self.param_steps[i]
            bias2 = 1.0 - beta2 ** self.param_steps[i]
            g = p.grad
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            denom = np.sqrt(v / bias2) + self.eps
            p.data -= (lr / bias1) * m / denom
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
