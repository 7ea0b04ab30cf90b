"""중앙 차분 gradient 검증

역전파 gradient를 중앙 차분 (f(x+h) - f(x-h)) / 2h 와 비교한다.
"""
from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from app.core.tensor import Tensor, backward, no_grad


def numerical_gradient(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    h: float = 1e-5,
    indices: Optional[np.ndarray] = None,
) -> np.ndarray:
    """tensor의 (일부) 원소에 대한 중앙 차분 gradient

    Args:
        fn: 매 호출마다 그래프를 새로 만드는 스칼라 loss 함수
        tensor: 미분 대상 leaf
        h: 차분 간격
        indices: 평탄화 인덱스 (없으면 전체)

    Returns:
        indices 순서의 1차원 배열
    """
    flat = tensor.data.reshape(-1)
    chosen = np.arange(flat.size) if indices is None else np.asarray(indices)
    result = np.empty(chosen.size, dtype=np.float64)
    with no_grad():
        for k, index in enumerate(chosen):
            original = flat[index]
            flat[index] = original + h
            upper = fn().item()
            flat[index] = original - h
            lower = fn().item()
            flat[index] = original
            result[k] = (upper - lower) / (2.0 * h)
    return result


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a|| + ||n||, floor)"""
    scale = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), floor)
    return float(np.linalg.norm(analytic - numeric)) / scale


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> dict[str, float]:
    """여러 leaf의 gradient를 한 번에 검증

    Args:
        fn: 스칼라 loss 함수
        tensors: 이름 → leaf (requires_grad)
        h: 차분 간격
        max_entries: 텐서당 검사할 최대 원소 수 (무작위 선택)
        seed: 원소 선택 시드

    Returns:
        이름 → 상대 오차
    """
    for tensor in tensors.values():
        tensor.zero_grad()
    backward(fn())

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, tensor in tensors.items():
        analytic = (
            tensor.grad.reshape(-1) if tensor.grad is not None else np.zeros(tensor.size)
        )
        indices = np.arange(tensor.size)
        if max_entries is not None and tensor.size > max_entries:
            indices = np.sort(rng.choice(tensor.size, size=max_entries, replace=False))
        numeric = numerical_gradient(fn, tensor, h=h, indices=indices)
        errors[name] = relative_error(analytic[indices], numeric)
    return errors
