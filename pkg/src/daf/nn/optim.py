"""AdamW, the warmup/step-decay learning-rate schedule, and finite-difference gradient checks."""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from ..errors import ShapeError, TrainingError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def adamw_state(params: Sequence[torch.Tensor]) -> dict:
    return {
        "step": 0,
        "m": [torch.zeros_like(p) for p in params],
        "v": [torch.zeros_like(p) for p in params],
    }


@torch.no_grad()
def adamw_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: dict,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (BETA1, BETA2),
    eps: float = EPS,
) -> dict:
    """One in-place AdamW update with decoupled weight decay.

    ``p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)``. A ``None``
    gradient is treated as zero. Raises :class:`TrainingError` naming the step
    index if any gradient is non-finite.
    """
    if len(params) != len(grads) or len(params) != len(state["m"]):
        raise ShapeError("params, grads and optimizer state disagree in length")
    step = state["step"] + 1
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient at optimizer step {step}")
    b1, b2 = betas
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m / bc1, denom, value=-lr)
    state["step"] = step
    return state


class AdamW:
    """Thin stateful wrapper around :func:`adamw_step` for a fixed parameter list."""

    def __init__(self, params: Iterable[torch.Tensor], lr: float = 2e-4, weight_decay: float = 1e-5):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = adamw_state(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.weight_decay)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {"step": torch.tensor([float(self.state["step"])])}
        for i, (m, v) in enumerate(zip(self.state["m"], self.state["v"])):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        self.state["step"] = int(tensors["step"].item())
        for i in range(len(self.params)):
            self.state["m"][i].copy_(tensors[f"m.{i}"])
            self.state["v"][i].copy_(tensors[f"v.{i}"])


def lr_at(config, epoch: int) -> float:
    """Linear warmup from ``base_lr / warmup`` to ``base_lr``, then x``decay_factor`` per decay epoch passed."""
    base = config.base_lr
    warm = config.warmup_epochs
    if epoch < warm:
        return base * (epoch + 1) / warm
    n_decays = sum(1 for d in config.decay_epochs if epoch >= d)
    return base * config.decay_factor**n_decays


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-4,
    n_samples: int = 30,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between autograd and central differences.

    Checks up to ``n_samples`` randomly chosen coordinates per parameter
    tensor. Relative error is ``|a - n| / max(|a|, |n|, floor)``. Use float64
    parameters for meaningful results.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            flat = p.view(-1)
            a_flat = torch.zeros_like(flat) if a is None else a.reshape(-1)
            n = flat.numel()
            idx = rng.choice(n, size=min(n_samples, n), replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = loss_fn().item()
                flat[i] = orig - epsilon
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2.0 * epsilon)
                ana = a_flat[i].item()
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                if math.isnan(err):
                    return float("inf")
                worst = max(worst, err)
    return worst
