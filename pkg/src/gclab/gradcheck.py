"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractError
from .tensor import Tape, Tensor, backward, no_tape


def numerical_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_tape():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(base)).item()
            flat[i] = orig - h
            fm = f(Tensor(base)).item()
            flat[i] = orig
            grad.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return grad


def tape_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    x = Tensor(x.data)
    with Tape() as tape:
        loss = f(x)
    if loss.size != 1:
        raise ContractError(f"f must return a scalar, got shape {loss.shape}")
    return backward(tape, loss).get(x, np.zeros(x.shape))


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape and central-difference gradients of ``f`` at ``x``."""
    return relative_error(tape_grad(f, x), numerical_grad(f, x, h))
