"""공통 데이터 모델

실험 설정 트리(ExperimentConfig)와 학습/평가 리포트.
설정 모델은 모두 extra="forbid"라 오타난 키는 검증 단계에서 거부된다.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# 기본 σ 단계 (정규화된 shape 기준 절대값)
DEFAULT_SIGMAS = [0.05, 0.1, 0.5, 1.0]


class HeadKind(str, Enum):
    """어텐션 head 종류"""
    DOT = "dot"
    GAUSSIAN = "gaussian"


class ResidualMode(str, Enum):
    """층 사이 residual attention 전달 방식"""
    POST_SOFTMAX = "post_softmax"   # 이전 층 ξ(softmax 이후)를 현재 logits에 더함
    PRE_SOFTMAX = "pre_softmax"     # 이전 층 softmax 이전 score를 누적
    NONE = "none"


class GaussianCross(str, Enum):
    """Gaussian head의 교차 shape 처리"""
    MASKED = "masked"     # 교차 블록 -∞ (softmax 이후 정확히 0)
    LITERAL = "literal"   # E=0 그대로 exp(0)=1


@dataclass(frozen=True)
class HeadSpec:
    """한 층의 한 head"""
    kind: HeadKind
    sigma_index: Optional[int] = None

    @property
    def is_gaussian(self) -> bool:
        return self.kind == HeadKind.GAUSSIAN

    def label(self) -> str:
        return f"gauss:{self.sigma_index}" if self.is_gaussian else "dot"


def parse_head_spec(text: str) -> HeadSpec:
    """"dot" 또는 "gauss:K" 문자열 → HeadSpec"""
    value = text.strip().lower()
    if value == "dot":
        return HeadSpec(HeadKind.DOT)
    if value.startswith("gauss:"):
        try:
            return HeadSpec(HeadKind.GAUSSIAN, int(value.split(":", 1)[1]))
        except ValueError as e:
            raise ValueError(f"invalid sigma index in head spec {text!r}") from e
    raise ValueError(f"head spec must be 'dot' or 'gauss:K', got {text!r}")


# ===== 모델 설정 =====

class ModelConfig(BaseModel):
    """인코더 구조 설정

    head 배치는 gaussian_heads/gaussian_layers로 만들거나 head_layout으로 직접 지정한다.
    Gaussian head는 층의 마지막 g개 위치에 놓이고 σ 인덱스 0..g-1을 차례로 쓴다.
    """
    model_config = ConfigDict(extra="forbid")

    d: int = Field(default=512, ge=2)
    heads: int = Field(default=8, ge=1)
    layers: int = Field(default=6, ge=1)
    gaussian_heads: int = Field(default=0, ge=0)
    gaussian_layers: Optional[list[int]] = None
    head_layout: Optional[list[list[str]]] = None
    sigmas: list[float] = Field(default_factory=lambda: list(DEFAULT_SIGMAS))
    sigma_learnable: bool = False
    sigma_min: float = Field(default=1e-3, gt=0)
    ff_hidden: Optional[int] = Field(default=None, ge=1)
    rope: bool = True
    rope_base: float = Field(default=10000.0, gt=0)
    residual_attention: ResidualMode = ResidualMode.POST_SOFTMAX
    gaussian_cross: GaussianCross = GaussianCross.MASKED
    sep_value: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @field_validator("sigmas")
    @classmethod
    def _positive_sigmas(cls, value: list[float]) -> list[float]:
        if any(not s > 0 for s in value):
            raise ValueError(f"every sigma must be > 0, got {value}")
        return value

    @model_validator(mode="after")
    def _check_layout(self) -> "ModelConfig":
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.head_layout is None:
            if self.gaussian_heads > self.heads:
                raise ValueError(f"gaussian_heads={self.gaussian_heads} exceeds heads={self.heads}")
            if self.gaussian_heads > len(self.sigmas):
                raise ValueError(
                    f"gaussian_heads={self.gaussian_heads} needs as many sigmas, got {len(self.sigmas)}"
                )
            for layer in self.gaussian_layers or []:
                if not 0 <= layer < self.layers:
                    raise ValueError(f"gaussian layer {layer} out of range for {self.layers} layers")
        layout = self.resolved_layout()
        if len(layout) != self.layers or any(len(row) != self.heads for row in layout):
            raise ValueError(f"head_layout must be {self.layers} rows of {self.heads} heads")
        for row in layout:
            for spec in row:
                if spec.is_gaussian and not 0 <= spec.sigma_index < len(self.sigmas):
                    raise ValueError(f"gaussian head references missing sigma index {spec.sigma_index}")
        has_dot = any(not spec.is_gaussian for row in layout for spec in row)
        if self.rope and has_dot and self.head_dim % 2:
            raise ValueError(f"RoPE needs an even head dimension, got {self.head_dim}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def ff_width(self) -> int:
        return self.ff_hidden if self.ff_hidden is not None else 4 * self.d

    def resolved_layout(self) -> list[list[HeadSpec]]:
        """층별 head 배치"""
        if self.head_layout is not None:
            return [[parse_head_spec(text) for text in row] for row in self.head_layout]
        gaussian_layers = (
            set(range(self.layers)) if self.gaussian_layers is None else set(self.gaussian_layers)
        )
        first_gaussian = self.heads - self.gaussian_heads
        layout = []
        for layer in range(self.layers):
            row = []
            for i in range(self.heads):
                if layer in gaussian_layers and i >= first_gaussian:
                    row.append(HeadSpec(HeadKind.GAUSSIAN, i - first_gaussian))
                else:
                    row.append(HeadSpec(HeadKind.DOT))
            layout.append(row)
        return layout

    def gaussian_head_count(self) -> int:
        return sum(spec.is_gaussian for row in self.resolved_layout() for spec in row)

    def describe_layout(self, sigmas: Optional[list[float]] = None) -> list[list[str]]:
        """층별 head 설명 ("dot" / "gauss:σ"), sigmas를 주지 않으면 설정값"""
        values = self.sigmas if sigmas is None else sigmas
        return [
            [f"gauss:{values[spec.sigma_index]:g}" if spec.is_gaussian else "dot" for spec in row]
            for row in self.resolved_layout()
        ]


# ===== 데이터/학습 설정 =====

class NoisePolicy(BaseModel):
    """노이즈 주입 정책 (fraction 비율의 점에 N(0, stddev²))"""
    model_config = ConfigDict(extra="forbid")

    fraction: float = Field(default=0.5, ge=0.0, le=1.0)
    stddev: float = Field(default=0.02, ge=0.0)


class AugmentPolicy(BaseModel):
    """학습 증강 정책"""
    model_config = ConfigDict(extra="forbid")

    rotate: bool = True
    permute: bool = True
    noise: Optional[NoisePolicy] = None


class DataConfig(BaseModel):
    """합성 데이터셋 설정"""
    model_config = ConfigDict(extra="forbid")

    count: int = Field(default=200, ge=2)
    n: int = Field(default=128, ge=16)
    seed: int = 0
    deformation_scale: float = Field(default=1.0, ge=0.0)


class OptimizerConfig(BaseModel):
    """Adam 설정"""
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(default=1e-4, gt=0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0)
    schedule: Literal["constant", "cosine"] = "constant"
    grad_clip: Optional[float] = Field(default=None, gt=0)


class LossConfig(BaseModel):
    """loss 설정"""
    model_config = ConfigDict(extra="forbid")

    reduction: Literal["mean", "sum"] = "mean"
    sep_weight: float = Field(default=1.0, ge=0.0)


class EvalConfig(BaseModel):
    """평가 설정"""
    model_config = ConfigDict(extra="forbid")

    pairs: int = Field(default=100, ge=1)
    seed: int = 0
    noise: Optional[NoisePolicy] = None
    rotate: bool = False
    permute: bool = False
    geodesic_normalization: Literal["none", "sqrt_area"] = "none"
    classification_pairs: int = Field(default=4, ge=1)


class ExperimentConfig(BaseModel):
    """실험 설정 트리 (TOML 파일 하나에 대응)"""
    model_config = ConfigDict(extra="forbid")

    variant: str = "custom"
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    augment: AugmentPolicy = Field(default_factory=AugmentPolicy)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    epochs: int = Field(default=600, ge=1)
    batch_shapes: int = Field(default=24, ge=2)
    seed: int = 0
    checkpoint_every: int = Field(default=0, ge=0)
    smoothing_window: int = Field(default=10, ge=1)
    layer_ablation_epochs: int = Field(default=100, ge=1)

    @field_validator("batch_shapes")
    @classmethod
    def _even_batch(cls, value: int) -> int:
        if value % 2:
            raise ValueError(f"batch_shapes must be even (shapes are paired), got {value}")
        return value


# ===== 학습 기록 =====

class LossBreakdown(BaseModel):
    """loss 구성요소"""
    l_xy: float
    l_yx: float
    l_sep: float
    total: float


class EpochRecord(BaseModel):
    """epoch 하나의 평균 loss"""
    epoch: int
    total: float
    l_xy: float
    l_yx: float
    l_sep: float
    sigmas: list[float] = Field(default_factory=list)
    lr: float
    wall_time: float


class TrainLog(BaseModel):
    """학습 기록"""
    variant: str
    records: list[EpochRecord] = Field(default_factory=list)
    best_epoch: Optional[int] = None
    best_loss: Optional[float] = None


# ===== 평가 리포트 =====

class MatchReport(BaseModel):
    """pair 하나의 매칭 결과"""
    pair_id: int
    source_index: int
    target_index: int
    direction: Literal["x_to_y", "y_to_x"]
    chamfer_xy: float
    chamfer_yx: float
    errors: list[float]
    mean_error: float


class TestsetSummary(BaseModel):
    """테스트셋 평가 요약"""
    __test__ = False

    pairs: int
    mean_error: float
    noise: Optional[NoisePolicy] = None
    rotate: bool = False
    permute: bool = False
    geodesic_normalization: str = "none"
    checkpoint_epoch: Optional[int] = None
    reports: list[MatchReport] = Field(default_factory=list)


class AblationReport(BaseModel):
    """ablation 단위 하나의 결과"""
    unit: Literal["head", "layer"]
    index: int
    mean_error: float
    baseline_error: Optional[float] = None
    label: Optional[Literal["self", "cross"]] = None
    kind: Optional[str] = None
    sigma: Optional[float] = None
    self_mass: Optional[float] = None
    cross_mass: Optional[float] = None


# ===== 파일 헤더/매니페스트 =====

class RunManifest(BaseModel):
    """CLI 실행 매니페스트"""
    command: str
    argv: list[str]
    seed: Optional[int] = None
    config: Optional[dict[str, Any]] = None
    versions: dict[str, str] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)
    summary: dict[str, Any] = Field(default_factory=dict)
    status: Literal["ok", "error"] = "ok"
    error: Optional[str] = None


class DatasetManifest(BaseModel):
    """데이터셋 디렉토리 매니페스트"""
    schema_version: int = 1
    name: str
    count: int
    n: int
    seed: Optional[int] = None
    has_mesh: bool
    files: list[str]
    generator: Optional[dict[str, Any]] = None


class CheckpointHeader(BaseModel):
    """체크포인트 헤더"""
    format: str
    version: int
    model: ModelConfig
    experiment: Optional[ExperimentConfig] = None
    sigmas: list[float]
    sigma_learnable: bool
    epoch: Optional[int] = None
    loss: Optional[float] = None
    parameters: dict[str, list[int]]
    digest: str
