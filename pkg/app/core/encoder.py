"""Gaussian 어텐션 transformer 인코더

입력 [X; SEP; Y] (2n+1)×3 을 d차원으로 투영하고 L개 인코더 층을 거쳐 다시 3차원으로 투영한다.
출력 행을 나누면 X̂ (X를 Y 모양으로 옮긴 점), SEP 출력, Ŷ 이 된다.

head 종류:
- dot: Q·R_Θ·Kᵀ/√d̃ (RoPE는 key에만 적용)
- gaussian: exp(-E²/2σ²), Q/K 투영 없이 V만 학습

head 위치 i마다 residual attention 스트림이 층을 건너 이어진다 (head 종류와 무관).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Collection, Optional, Sequence, Union

import numpy as np

from app.core.errors import ConfigError, ContractError, DimensionError
from app.core.geometry import BlockDistanceMatrix, PointCloud, block_distance_matrix, gaussian_energy
from app.core.models import GaussianCross, HeadSpec, ModelConfig, ResidualMode
from app.core.tensor import (
    Tensor,
    add,
    clamp_min,
    concat,
    getitem,
    layer_norm,
    linear,
    masked_fill,
    matmul,
    no_grad,
    relu,
    rotary,
    scale,
    softmax_rows,
    transpose,
)
from app.utils.logger import get_logger

logger = get_logger(__name__)

# (layer, head) 쌍 집합
HeadMask = Collection[tuple[int, int]]

SIGMA_PARAM = "sigmas"


# ===== RoPE =====

def rope_thetas(dim: int, base: float = 10000.0) -> np.ndarray:
    """θ_i = base^(-2(i-1)/dim), i = 1..dim/2

    Raises:
        ConfigError: dim이 홀수
    """
    if dim <= 0 or dim % 2:
        raise ConfigError(f"RoPE needs an even positive dimension, got {dim}")
    return base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)


@dataclass(frozen=True)
class RopeRotation:
    """위치별 회전 각도의 cos/sin [positions × dim/2]

    블록 대각 회전 행렬은 만들지 않고 좌표쌍에 원소별로 적용한다.
    """
    cos: np.ndarray
    sin: np.ndarray

    def apply(self, x: Tensor) -> Tensor:
        return rotary(x, self.cos, self.sin)

    def apply_array(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return rotary(Tensor(x), self.cos, self.sin).data


def rope_rotation(
    position: Union[int, Sequence[int], np.ndarray],
    dim: int,
    base: float = 10000.0,
) -> RopeRotation:
    """위치 m (또는 위치 배열)에 대한 회전 m·θ_i"""
    positions = np.atleast_1d(np.asarray(position, dtype=np.float64))
    angles = np.outer(positions, rope_thetas(dim, base))
    return RopeRotation(np.cos(angles), np.sin(angles))


# ===== 어텐션 단위 연산 =====

def concat_inputs(x: PointCloud, y: PointCloud, sep: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """[X; sep; Y] 행렬 ((n_X+1+n_Y)×3)"""
    sep_row = np.asarray(sep, dtype=np.float64).reshape(1, 3)
    return np.concatenate([x.points, sep_row, y.points], axis=0)


def split_outputs(rows: np.ndarray, n_x: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """concat_inputs의 역: (X 부분, SEP 행, Y 부분)"""
    return rows[:n_x], rows[n_x:n_x + 1], rows[n_x + 1:]


def dot_head_logits(q: Tensor, k: Tensor, rope: Optional[RopeRotation] = None) -> Tensor:
    """Q·R_Θ·Kᵀ/√d̃ (softmax 이전)"""
    if q.shape != k.shape:
        raise DimensionError(f"query/key shape mismatch: {q.shape} vs {k.shape}")
    keys = rope.apply(k) if rope is not None else k
    return scale(matmul(q, transpose(keys)), 1.0 / np.sqrt(q.shape[1]))


def residual_softmax(
    logits: Tensor,
    previous: Optional[Tensor],
    mode: ResidualMode = ResidualMode.POST_SOFTMAX,
) -> tuple[Tensor, Tensor]:
    """residual 스트림을 더한 softmax

    Returns:
        (ξ, 다음 층으로 넘길 스트림 값)
        post_softmax → ξ, pre_softmax → 누적 score, none → ξ (사용되지 않음)

    pre_softmax 스트림의 마스크 칸(-inf)은 0으로 넘긴다. 다음 층이 dot head이면 그 칸도 다시 열린다.
    """
    combined = logits
    if previous is not None and mode != ResidualMode.NONE:
        combined = add(logits, previous)
    xi = softmax_rows(combined)
    if mode == ResidualMode.PRE_SOFTMAX:
        return xi, masked_fill(combined, ~np.isfinite(combined.data), 0.0)
    return xi, xi


def dot_head_energy(
    q: Tensor,
    k: Tensor,
    prev_xi: Optional[Tensor] = None,
    rope: Optional[RopeRotation] = None,
) -> Tensor:
    """ξ = softmax(Q·R_Θ·Kᵀ/√d̃ + ξ_prev)"""
    xi, _ = residual_softmax(dot_head_logits(q, k, rope), prev_xi)
    return xi


def gaussian_head_energy(
    distances: BlockDistanceMatrix,
    sigma: Union[float, Tensor],
    prev_xi: Optional[Tensor] = None,
    literal_cross: bool = False,
) -> Tensor:
    """ξ = softmax(exp(-E²/2σ²) + ξ_prev) (교차 블록은 정확히 0)"""
    xi, _ = residual_softmax(gaussian_energy(distances, sigma, literal_cross), prev_xi)
    return xi


def attention_apply(xi: Tensor, values: Tensor) -> Tensor:
    """ξ·V (각 출력 행은 V 행들의 볼록 결합)"""
    return matmul(xi, values)


# ===== 상태/결과 =====

@dataclass
class AttentionState:
    """head 위치별 residual 스트림

    carry는 다음 층 softmax 인자에 더해지는 값, weights는 직전 층의 ξ.
    """
    carry: list[Tensor]
    weights: list[Tensor] = field(default_factory=list)

    @classmethod
    def initial(cls, heads: int, size: int) -> "AttentionState":
        zeros = Tensor(np.zeros((size, size)))
        return cls(carry=[zeros] * heads, weights=[])


@dataclass
class ForwardResult:
    """model_forward 결과

    output은 (n_X+1+n_Y)×3 텐서, attention은 record=True일 때 [layer][head] ξ 배열.
    """
    output: Tensor
    n_x: int
    n_y: int
    attention: Optional[list[list[np.ndarray]]] = None

    @property
    def x_hat(self) -> Tensor:
        return getitem(self.output, slice(0, self.n_x))

    @property
    def sep_out(self) -> Tensor:
        return getitem(self.output, slice(self.n_x, self.n_x + 1))

    @property
    def y_hat(self) -> Tensor:
        return getitem(self.output, slice(self.n_x + 1, None))

    def x_hat_cloud(self) -> PointCloud:
        return PointCloud(self.output.data[:self.n_x])

    def y_hat_cloud(self) -> PointCloud:
        return PointCloud(self.output.data[self.n_x + 1:])


# ===== 모델 =====

def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _projection_bias(rng: np.random.Generator, shapes: dict[str, tuple[int, ...]], name: str) -> np.ndarray:
    """투영 bias는 U(-1/√fan_in, 1/√fan_in), layer norm bias는 0"""
    weight = shapes.get(name[: -len(".bias")] + ".weight")
    if weight is None:
        return np.zeros(shapes[name])
    bound = 1.0 / np.sqrt(weight[0])
    return rng.uniform(-bound, bound, size=shapes[name])


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """파라미터 이름 → shape (생성 순서)"""
    d, dh, ff = config.d, config.head_dim, config.ff_width
    shapes: dict[str, tuple[int, ...]] = {
        "input_proj.weight": (3, d),
        "input_proj.bias": (d,),
    }
    for j, row in enumerate(config.resolved_layout()):
        for i, spec in enumerate(row):
            projections = ("value",) if spec.is_gaussian else ("query", "key", "value")
            for proj in projections:
                shapes[f"layers.{j}.heads.{i}.{proj}.weight"] = (d, dh)
                shapes[f"layers.{j}.heads.{i}.{proj}.bias"] = (dh,)
        shapes[f"layers.{j}.attn_out.weight"] = (d, d)
        shapes[f"layers.{j}.attn_out.bias"] = (d,)
        shapes[f"layers.{j}.ff1.weight"] = (d, ff)
        shapes[f"layers.{j}.ff1.bias"] = (ff,)
        shapes[f"layers.{j}.ff2.weight"] = (ff, d)
        shapes[f"layers.{j}.ff2.bias"] = (d,)
        for norm in ("norm1", "norm2"):
            shapes[f"layers.{j}.{norm}.gain"] = (d,)
            shapes[f"layers.{j}.{norm}.bias"] = (d,)
    shapes["output_proj.weight"] = (d, 3)
    shapes["output_proj.bias"] = (3,)
    shapes[SIGMA_PARAM] = (len(config.sigmas),)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    """학습 파라미터 스칼라 개수 (σ는 learnable일 때만 포함)"""
    total = 0
    for name, shape in parameter_shapes(config).items():
        if name == SIGMA_PARAM and not config.sigma_learnable:
            continue
        total += int(np.prod(shape))
    return total


class EncoderModel:
    """인코더 파라미터 묶음

    forward 중에는 파라미터를 바꾸지 않으므로 여러 스레드에서 동시에 predict 할 수 있다.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.layout: list[list[HeadSpec]] = config.resolved_layout()

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "EncoderModel":
        """Xavier uniform 가중치, 투영 bias U(±1/√fan_in), layer norm gain 1 / bias 0

        투영 bias를 0으로 두면 SEP 입력 행(0 벡터)이 0층에서 분산 0으로 layer norm에 들어간다.
        """
        rng = np.random.default_rng(seed)
        shapes = parameter_shapes(config)
        params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            if name == SIGMA_PARAM:
                params[name] = Tensor(config.sigmas, requires_grad=config.sigma_learnable, name=name)
                continue
            if name.endswith(".gain"):
                data = np.ones(shape)
            elif name.endswith(".bias"):
                data = _projection_bias(rng, shapes, name)
            else:
                data = _xavier(rng, *shape)
            params[name] = Tensor(data, requires_grad=True, name=name)
        logger.debug(
            "Encoder initialized",
            d=config.d,
            heads=config.heads,
            layers=config.layers,
            gaussian_heads=config.gaussian_head_count(),
            parameters=parameter_count(config),
        )
        return cls(config, params)

    # ===== 파라미터 =====

    def parameters(self) -> dict[str, Tensor]:
        """학습 대상 파라미터 (고정 σ 제외)"""
        return {name: p for name, p in self.params.items() if p.requires_grad}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """이름/shape가 정확히 맞는 배열로 파라미터 교체"""
        expected = parameter_shapes(self.config)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            unexpected = sorted(set(arrays) - set(expected))
            raise ContractError(f"parameter names differ: missing={missing[:3]}, unexpected={unexpected[:3]}")
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != shape:
                raise DimensionError(f"parameter {name} has shape {arrays[name].shape}, expected {shape}")
        for name, array in arrays.items():
            self.params[name].data = np.array(array, dtype=np.float64)

    def sigma_values(self) -> list[float]:
        """use site와 같은 clamp를 적용한 σ 값"""
        raw = self.params[SIGMA_PARAM].data
        return [float(s) for s in np.maximum(raw, self.config.sigma_min)]

    def head_sigma(self, sigma_index: int) -> Tensor:
        return getitem(clamp_min(self.params[SIGMA_PARAM], self.config.sigma_min), sigma_index)

    def describe_layout(self) -> list[list[str]]:
        """층별 head 설명 ("dot" / "gauss:σ")"""
        return self.config.describe_layout(self.sigma_values())

    # ===== 추론 =====

    def forward(self, x: PointCloud, y: PointCloud, head_mask: HeadMask = (), record: bool = False) -> ForwardResult:
        return model_forward(self, x, y, head_mask=head_mask, record=record)

    def predict(self, x: PointCloud, y: PointCloud, head_mask: HeadMask = (), record: bool = False) -> ForwardResult:
        """그래프 없이 forward (평가/스레드 공유용)"""
        with no_grad():
            return model_forward(self, x, y, head_mask=head_mask, record=record)


# ===== 층 =====

def encoder_layer_forward(
    model: EncoderModel,
    layer: int,
    x: Tensor,
    state: AttentionState,
    distances: Optional[BlockDistanceMatrix],
    mask: Optional[Sequence[bool]] = None,
    rope: Optional[RopeRotation] = None,
) -> tuple[Tensor, AttentionState]:
    """
    인코더 층 하나

    heads → concat → 출력 투영 → residual + LN → FF(linear, ReLU, linear) → residual + LN.
    마스킹된 head는 0 출력과 0 스트림을 낸다. 모든 head가 마스킹되면 어텐션 서브층은 residual만 남는다.

    Returns:
        (층 출력, 갱신된 AttentionState)
    """
    config = model.config
    params = model.params
    specs = model.layout[layer]
    size = x.shape[0]
    mask = list(mask) if mask is not None else [False] * len(specs)
    if len(mask) != len(specs):
        raise DimensionError(f"head mask has {len(mask)} entries for {len(specs)} heads")
    if len(state.carry) != len(specs) or state.carry[0].shape != (size, size):
        raise DimensionError(f"attention state does not match {len(specs)} heads of size {size}")

    mode = config.residual_attention
    literal = config.gaussian_cross == GaussianCross.LITERAL
    zero_stream = Tensor(np.zeros((size, size)))

    outputs: list[Tensor] = []
    carry: list[Tensor] = []
    weights: list[Tensor] = []
    for i, spec in enumerate(specs):
        if mask[i]:
            outputs.append(Tensor(np.zeros((size, config.head_dim))))
            carry.append(zero_stream)
            weights.append(zero_stream)
            continue

        prefix = f"layers.{layer}.heads.{i}"
        values = linear(x, params[f"{prefix}.value.weight"], params[f"{prefix}.value.bias"])
        if spec.is_gaussian:
            if distances is None:
                raise ContractError("gaussian head needs a block distance matrix")
            logits = gaussian_energy(distances, model.head_sigma(spec.sigma_index), literal_cross=literal)
        else:
            q = linear(x, params[f"{prefix}.query.weight"], params[f"{prefix}.query.bias"])
            k = linear(x, params[f"{prefix}.key.weight"], params[f"{prefix}.key.bias"])
            logits = dot_head_logits(q, k, rope)

        xi, stream = residual_softmax(logits, state.carry[i], mode)
        outputs.append(attention_apply(xi, values))
        carry.append(stream)
        weights.append(xi)

    prefix = f"layers.{layer}"
    if all(mask):
        hidden = layer_norm(x, params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"])
    else:
        attended = linear(
            concat(outputs, axis=1),
            params[f"{prefix}.attn_out.weight"],
            params[f"{prefix}.attn_out.bias"],
        )
        hidden = layer_norm(add(x, attended), params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"])

    inner = relu(linear(hidden, params[f"{prefix}.ff1.weight"], params[f"{prefix}.ff1.bias"]))
    fed = linear(inner, params[f"{prefix}.ff2.weight"], params[f"{prefix}.ff2.bias"])
    out = layer_norm(add(hidden, fed), params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"])
    return out, AttentionState(carry=carry, weights=weights)


def model_forward(
    model: EncoderModel,
    x: PointCloud,
    y: PointCloud,
    head_mask: HeadMask = (),
    record: bool = False,
) -> ForwardResult:
    """
    입력 투영 → L개 인코더 층 (AttentionState 전달) → 출력 투영

    Args:
        model: 인코더
        x, y: 정규화된 점군
        head_mask: 마스킹할 (layer, head) 쌍
        record: 층별 ξ 보관 여부 (export/ablation용)
    """
    config = model.config
    masked = set(head_mask)
    for layer, head in masked:
        if not (0 <= layer < config.layers and 0 <= head < config.heads):
            raise ContractError(f"head mask ({layer}, {head}) out of range")

    inputs = concat_inputs(x, y, config.sep_value)
    size = inputs.shape[0]
    specs = [spec for row in model.layout for spec in row]
    distances = block_distance_matrix(x, y) if any(s.is_gaussian for s in specs) else None
    rope = None
    if config.rope and not all(s.is_gaussian for s in specs):
        rope = rope_rotation(np.arange(size), config.head_dim, config.rope_base)

    params = model.params
    hidden = linear(Tensor(inputs), params["input_proj.weight"], params["input_proj.bias"])
    state = AttentionState.initial(config.heads, size)
    records: list[list[np.ndarray]] = []
    for layer in range(config.layers):
        mask = [(layer, head) in masked for head in range(config.heads)]
        hidden, state = encoder_layer_forward(model, layer, hidden, state, distances, mask, rope)
        if record:
            records.append([w.data for w in state.weights])

    output = linear(hidden, params["output_proj.weight"], params["output_proj.bias"])
    return ForwardResult(output=output, n_x=len(x), n_y=len(y), attention=records if record else None)
