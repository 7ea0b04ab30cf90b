"""Adam 옵티마이저

bias correction 포함 표준 Adam. 상태(AdamState)는 파라미터 이름으로 moment 버퍼를 관리한다.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from app.core.errors import DimensionError
from app.core.tensor import Tensor


@dataclass
class AdamState:
    """Adam 상태"""
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
) -> None:
    """Adam 1 step (파라미터 데이터를 교체한다)

    gradient가 없는(None) 파라미터는 건너뛴다.

    Raises:
        DimensionError: gradient와 파라미터 shape 불일치
    """
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step

    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise DimensionError(f"gradient shape {grad.shape} != parameter shape {param.shape} ({name})")

        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or v is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)

        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * (grad * grad)
        state.m[name] = m
        state.v[name] = v

        m_hat = m / bc1
        v_hat = v / bc2
        param.data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """파라미터 묶음에 붙는 Adam 옵티마이저"""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def step(self) -> None:
        adam_step(self.params, {name: p.grad for name, p in self.params.items()}, self.state)


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """전체 gradient L2 norm을 max_norm 이하로 자른다

    Returns:
        clip 이전 norm
    """
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm > 0:
        factor = max_norm / total
        for param in params.values():
            if param.grad is not None:
                param.grad = param.grad * factor
    return total
