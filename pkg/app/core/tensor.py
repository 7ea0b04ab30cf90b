"""Reverse-mode 자동미분 텐서

numpy float64 배열 위의 tape 기반 계산 그래프.
인코더 학습에 필요한 연산만 제공한다 (broadcasting은 bias/스칼라 수준까지만).

주요 기능:
- Tensor: 데이터 + requires_grad + grad 버퍼
- 연산: matmul, add/sub/mul/scale, relu, exp, softmax_rows, layer_norm, rotary 등
- backward: 위상 정렬 후 역전파, 끝나면 tape 해제
- no_grad: 스레드 단위로 그래프 기록 중단 (추론용)
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np

from app.core.errors import ContractError, DegenerateRowError, DimensionError


# 마스킹 표식 (softmax 내부에서 MASK_FILL로 낮춘다)
MASKED = -np.inf
MASK_FILL = -1e30
# layer_norm 분산 epsilon
LAYER_NORM_EPS = 1e-5

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    """현재 스레드에서 그래프를 기록하는지 여부"""
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """블록 안에서는 그래프를 만들지 않는다 (스레드 로컬)"""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """자동미분 텐서

    requires_grad가 False인 텐서는 생성 후 변경하지 않는다 (읽기 전용 공유 가능).
    """

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # ===== 속성 =====

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # ===== 연산자 =====

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key: Any) -> "Tensor":
        return getitem(self, key)


def as_tensor(value: Any) -> Tensor:
    """Tensor가 아니면 상수 텐서로 감싼다"""
    return value if isinstance(value, Tensor) else Tensor(value)


# ===== 그래프 내부 =====

def _node(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward_fn: Callable[[np.ndarray], None],
) -> Tensor:
    """연산 결과 노드 생성 (기록이 꺼져 있으면 leaf 상수)"""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    tracked = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    out._parents = parents if tracked else ()
    out._backward = backward_fn if tracked else None
    return out


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    grad = np.reshape(grad, tensor.data.shape)
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64)
    else:
        tensor.grad = tensor.grad + grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """broadcast된 gradient를 원래 shape로 합산"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """스칼라 loss에서 역전파

    requires_grad인 모든 조상 leaf에 gradient를 누적한다.
    끝나면 tape를 해제하므로 같은 그래프로 두 번 호출할 수 없다.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    # tape 해제 (leaf grad만 남긴다)
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node.grad = None


# ===== 원소별 연산 =====

def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(grad, b.shape))

    return _node(a.data + b.data, (a, b), backward_fn)


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(-grad, b.shape))

    return _node(a.data - b.data, (a, b), backward_fn)


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(grad * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(grad * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    """상수 배"""
    factor = float(factor)

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(x, grad * factor)

    return _node(x.data * factor, (x,), backward_fn)


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(x, -grad * out * out)

    return _node(out, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(x, grad * active)

    return _node(np.where(active, x.data, 0.0), (x,), backward_fn)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(x, grad * out)

    return _node(out, (x,), backward_fn)


def clamp_min(x: Tensor, minimum: float) -> Tensor:
    """하한 clamp (하한 아래 원소는 gradient 0)"""
    kept = x.data >= minimum

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(x, grad * kept)

    return _node(np.where(kept, x.data, minimum), (x,), backward_fn)


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASKED) -> Tensor:
    """mask 위치를 value로 채우고 그 위치의 gradient는 0으로 자른다"""
    mask = np.asarray(mask, dtype=bool)

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(x, np.where(mask, 0.0, grad))

    return _node(np.where(mask, value, x.data), (x,), backward_fn)


# ===== 축소/형태 연산 =====

def sum_all(x: Tensor) -> Tensor:
    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(grad, x.shape))

    return _node(np.asarray(np.sum(x.data)), (x,), backward_fn)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / max(x.size, 1))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {x.shape}")

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(x, grad.T)

    return _node(x.data.T.copy(), (x,), backward_fn)


def getitem(x: Tensor, key: Any) -> Tensor:
    def backward_fn(grad: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        np.add.at(full, key, grad)
        _accumulate(x, full)

    return _node(np.array(x.data[key]), (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise ContractError("concat needs at least one tensor")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward_fn(grad: np.ndarray) -> None:
        for part, piece in zip(parts, np.split(grad, bounds, axis=axis)):
            _accumulate(part, piece)

    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat shape mismatch: {[p.shape for p in parts]}") from e
    return _node(data, parts, backward_fn)


# ===== 선형대수 =====

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """행렬곱 [n×k]·[k×m]"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward_fn(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, grad @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ grad)

    return _node(a.data @ b.data, (a, b), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x·W + b (행 단위 affine)"""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# ===== 어텐션/정규화 =====

def softmax_rows(x: Tensor) -> Tensor:
    """행 단위 softmax

    MASKED(-inf) 원소는 MASK_FILL로 낮춰 계산하고 결과와 gradient 모두 정확히 0이 된다.

    Raises:
        DegenerateRowError: 행 전체가 마스킹된 경우
    """
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got shape {x.shape}")
    mask = np.isneginf(x.data)
    if mask.any():
        dead = np.flatnonzero(mask.all(axis=1))
        if dead.size:
            raise DegenerateRowError(f"fully masked softmax row(s): {dead[:5].tolist()}")

    logits = np.where(mask, MASK_FILL, x.data)
    logits = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights[mask] = 0.0
    out = weights / weights.sum(axis=1, keepdims=True)

    def backward_fn(grad: np.ndarray) -> None:
        gx = out * (grad - np.sum(grad * out, axis=1, keepdims=True))
        gx[mask] = 0.0
        _accumulate(x, gx)

    return _node(out, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """행 단위 layer normalization (분산에 eps를 더한다)"""
    if x.ndim != 2 or x.shape[1] < 2:
        raise DimensionError(f"layer_norm needs [n×d] with d >= 2, got shape {x.shape}")
    width = x.shape[1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"layer_norm affine shape mismatch: gain {gain.shape}, bias {bias.shape}, width {width}"
        )

    centered = x.data - x.data.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=1, keepdims=True) + eps)
    normed = centered * inv_std

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(gain, np.sum(grad * normed, axis=0))
        _accumulate(bias, np.sum(grad, axis=0))
        if x.requires_grad:
            dnormed = grad * gain.data
            gx = (inv_std / width) * (
                width * dnormed
                - dnormed.sum(axis=1, keepdims=True)
                - normed * np.sum(dnormed * normed, axis=1, keepdims=True)
            )
            _accumulate(x, gx)

    return _node(normed * gain.data + bias.data, (x, gain, bias), backward_fn)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """좌표쌍 (2i, 2i+1)을 행마다 주어진 각도로 2D 회전

    Args:
        x: [rows×D] (D 짝수)
        cos, sin: [rows×D/2] 상수
    """
    if x.ndim != 2 or x.shape[1] % 2 or cos.shape != (x.shape[0], x.shape[1] // 2):
        raise DimensionError(f"rotary shape mismatch: x {x.shape}, angles {cos.shape}")
    even = x.data[:, 0::2]
    odd = x.data[:, 1::2]
    out = np.empty_like(x.data)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos

    def backward_fn(grad: np.ndarray) -> None:
        g_even = grad[:, 0::2]
        g_odd = grad[:, 1::2]
        gx = np.empty_like(grad)
        gx[:, 0::2] = g_even * cos + g_odd * sin
        gx[:, 1::2] = g_odd * cos - g_even * sin
        _accumulate(x, gx)

    return _node(out, (x,), backward_fn)
