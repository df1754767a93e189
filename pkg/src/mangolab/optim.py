"""Decoupled-weight-decay Adam and the warmup/linear-decay schedule."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter
from .errors import ContractError


def lr_at_step(total_steps: int, peak_lr: float, warmup_fraction: float, step: int) -> float:
    """Linear ramp 0 -> peak over the warmup span, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_fraction * total_steps
    if step < warmup:
        return peak_lr * step / warmup
    if total_steps == warmup:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup)


def adamw_update(
    param: Parameter,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    weight_decay: float = 0.01,
    eps: float = 1e-8,
    grad: np.ndarray | None = None,
) -> None:
    g = param.grad if grad is None else grad
    if g is None:
        raise ContractError(f"parameter {param.name} has no gradient")
    param.step_count += 1
    t = param.step_count
    param.moment1 = beta1 * param.moment1 + (1.0 - beta1) * g
    param.moment2 = beta2 * param.moment2 + (1.0 - beta2) * (g * g)
    m_hat = param.moment1 / (1.0 - beta1**t)
    v_hat = param.moment2 / (1.0 - beta2**t)
    data = param.tensor.data
    data -= lr * weight_decay * data
    data -= lr * m_hat / (np.sqrt(v_hat) + eps)
