"""평가 / ablation

주요 기능:
- evaluate_pair: chamfer로 방향 선택 → 최근접 매칭 → 정답 대상까지 geodesic 오차
- evaluate_testset: seed로 뽑은 pair들의 평균 오차 (노이즈/회전/순열 변형, 스레드 병렬)
- classify_head: 사분면 질량으로 self/cross 분류 (SEP 행/열 제외)
- ablate_heads: head 하나씩 모든 층에서 마스킹
- ablate_layers: 층마다 Gaussian head를 그 층에만 두고 새로 짧게 학습
- export_attention: ξ 행렬 CSV + 한 점의 행을 점별 스칼라 필드로
"""
import csv
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from app.config import get_settings
from app.core.encoder import EncoderModel, HeadMask, concat_inputs
from app.core.errors import AttentionIndexError, ConfigError, ContractError
from app.core.geometry import (
    ROTATION_MODES,
    Correspondence,
    MeshRef,
    PointCloud,
    apply_permutation,
    chamfer,
    geodesic_rows,
    inject_noise,
    nearest_neighbor_match,
    random_rotation,
    rotate,
    surface_scale,
)
from app.core.models import (
    AblationReport,
    ExperimentConfig,
    MatchReport,
    NoisePolicy,
    TestsetSummary,
)
from app.services.dataset import ShapeDataset
from app.services.trainer import train
from app.utils.files import atomic_write, ensure_dir, format_float
from app.utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

# 노이즈 평가 기본값: 모든 점에 N(0, 0.01²)
EVAL_NOISE = NoisePolicy(fraction=1.0, stddev=0.01)
# attention_support 기본 임계값
SUPPORT_THRESHOLD = 1e-3

MATCH_COLUMNS = (
    "pair_id", "source_index", "target_index", "direction", "chamfer_xy", "chamfer_yx", "mean_error",
)
ABLATION_COLUMNS = (
    "unit", "index", "mean_error", "baseline_error", "label", "kind", "sigma", "self_mass", "cross_mass",
)


# ===== pair 평가 =====

def evaluate_pair(
    model: EncoderModel,
    x: PointCloud,
    y: PointCloud,
    mesh_y: MeshRef,
    mesh_x: MeshRef,
    corr: Correspondence,
    pair_id: int = 0,
    head_mask: HeadMask = (),
    normalization: str = "none",
    source_index: int = -1,
    target_index: int = -1,
) -> MatchReport:
    """
    pair 하나의 매칭 평가

    chamfer(X̂, Y) <= chamfer(Ŷ, X)이면 X→Y 방향: X 각 점을 X̂의 Y 최근접 점과 매칭하고
    Y 메시 위에서 정답 점 π(i)까지 geodesic 거리를 잰다. 아니면 Y→X 방향으로 같은 절차.

    Raises:
        UnreachableVertexError: 대상 메시가 연결되어 있지 않음
    """
    result = model.predict(x, y, head_mask=head_mask)
    x_hat, y_hat = result.x_hat_cloud(), result.y_hat_cloud()
    chamfer_xy = chamfer(x_hat, y)
    chamfer_yx = chamfer(y_hat, x)

    if chamfer_xy <= chamfer_yx:
        direction = "x_to_y"
        matches = nearest_neighbor_match(x_hat, y)
        truth = corr.pairs
        mesh = mesh_y
    else:
        direction = "y_to_x"
        matches = nearest_neighbor_match(y_hat, x)
        truth = corr.inverse().pairs
        mesh = mesh_x

    rows = geodesic_rows(mesh, truth)
    errors = rows[np.arange(len(truth)), matches] / surface_scale(mesh, normalization)
    return MatchReport(
        pair_id=pair_id,
        source_index=source_index,
        target_index=target_index,
        direction=direction,
        chamfer_xy=chamfer_xy,
        chamfer_yx=chamfer_yx,
        errors=[float(e) for e in errors],
        mean_error=float(np.mean(errors)),
    )


def sample_pairs(dataset_size: int, pairs: int, seed: int) -> list[tuple[int, int]]:
    """서로 다른 shape 쌍 pairs개 (seed 고정)"""
    if dataset_size < 2:
        raise ContractError("evaluation needs at least two shapes")
    rng = np.random.default_rng(seed)
    return [tuple(int(i) for i in rng.choice(dataset_size, size=2, replace=False)) for _ in range(pairs)]


def _prepare_pair(
    dataset: ShapeDataset,
    pair_id: int,
    source: int,
    target: int,
    seed: int,
    noise: Optional[NoisePolicy],
    rotate_shapes: bool,
    permute_shapes: bool,
) -> tuple[PointCloud, PointCloud, MeshRef, MeshRef, Correspondence]:
    """pair 입력 변형 (pair마다 회전/노이즈/순열 난수 스트림이 따로 있다)

    geodesic은 깨끗한 원본 메시에서 잰다. 메시는 순열만 따라간다.
    """
    x, y = dataset.clouds[source], dataset.clouds[target]
    mesh_x, mesh_y = dataset.mesh(source), dataset.mesh(target)
    corr = Correspondence.identity(dataset.n)

    if rotate_shapes:
        rng = np.random.default_rng([seed, pair_id, 0])
        x = rotate(x, random_rotation(ROTATION_MODES[rng.integers(len(ROTATION_MODES))], rng))
        y = rotate(y, random_rotation(ROTATION_MODES[rng.integers(len(ROTATION_MODES))], rng))
    if noise is not None:
        rng = np.random.default_rng([seed, pair_id, 1])
        x = inject_noise(x, noise.fraction, noise.stddev, rng)
        y = inject_noise(y, noise.fraction, noise.stddev, rng)
    if permute_shapes:
        rng = np.random.default_rng([seed, pair_id, 2])
        perm_x = rng.permutation(len(x))
        perm_y = rng.permutation(len(y))
        x, corr = apply_permutation(x, corr, perm_x, side="source")
        y, corr = apply_permutation(y, corr, perm_y, side="target")
        mesh_x = mesh_x.permuted(perm_x)
        mesh_y = mesh_y.permuted(perm_y)
    return x, y, mesh_x, mesh_y, corr


def evaluate_testset(
    model: EncoderModel,
    dataset: ShapeDataset,
    pairs: int = 100,
    noise: Optional[NoisePolicy] = None,
    seed: int = 0,
    rotate_shapes: bool = False,
    permute_shapes: bool = False,
    normalization: str = "none",
    head_mask: HeadMask = (),
    workers: Optional[int] = None,
    checkpoint_epoch: Optional[int] = None,
) -> TestsetSummary:
    """
    테스트셋 평균 geodesic 오차

    pair 선택과 변형 난수는 seed로만 정해지고 노이즈 여부와 독립이다.
    pair 평가는 읽기 전용 모델을 공유하는 스레드 풀에서 돈다.
    """
    if not dataset.has_mesh:
        raise ContractError(f"dataset {dataset.name!r} has no meshes; geodesic evaluation needs connectivity")
    workers = workers or get_settings().eval_workers
    chosen = sample_pairs(len(dataset), pairs, seed)

    def run(item: tuple[int, tuple[int, int]]) -> MatchReport:
        pair_id, (source, target) = item
        x, y, mesh_x, mesh_y, corr = _prepare_pair(
            dataset, pair_id, source, target, seed, noise, rotate_shapes, permute_shapes
        )
        return evaluate_pair(
            model, x, y, mesh_y, mesh_x, corr,
            pair_id=pair_id,
            head_mask=head_mask,
            normalization=normalization,
            source_index=source,
            target_index=target,
        )

    items = list(enumerate(chosen))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            reports = list(executor.map(run, items))
    else:
        reports = [run(item) for item in items]

    summary = TestsetSummary(
        pairs=len(reports),
        mean_error=float(np.mean([r.mean_error for r in reports])),
        noise=noise,
        rotate=rotate_shapes,
        permute=permute_shapes,
        geodesic_normalization=normalization,
        checkpoint_epoch=checkpoint_epoch,
        reports=reports,
    )
    logger.info(
        "Testset evaluated",
        pairs=summary.pairs,
        mean_error=summary.mean_error,
        noisy=noise is not None,
        rotate=rotate_shapes,
        permute=permute_shapes,
        masked_heads=len(list(head_mask)),
    )
    return summary


# ===== head 분류 =====

def quadrant_masses(xi: np.ndarray, n_x: int) -> tuple[float, float]:
    """(self 질량 UL+LR, cross 질량 UR+LL), SEP 행/열 제외"""
    xi = np.asarray(xi)
    sep = n_x
    upper_left = xi[:sep, :sep].sum()
    lower_right = xi[sep + 1:, sep + 1:].sum()
    upper_right = xi[:sep, sep + 1:].sum()
    lower_left = xi[sep + 1:, :sep].sum()
    return float(upper_left + lower_right), float(upper_right + lower_left)


def label_from_masses(self_mass: float, cross_mass: float) -> str:
    """질량이 큰 쪽 라벨 (동률이면 self)"""
    if self_mass == cross_mass:
        logger.warning("Head classification tie", self_mass=self_mass, cross_mass=cross_mass)
        return "self"
    return "self" if self_mass > cross_mass else "cross"


def classify_head(xi: np.ndarray, n: int) -> str:
    """사분면 질량 비교로 self/cross"""
    return label_from_masses(*quadrant_masses(xi, n))


def _final_layer_masses(
    model: EncoderModel,
    dataset: ShapeDataset,
    pairs: Sequence[tuple[int, int]],
) -> list[tuple[float, float]]:
    """마지막 층 head별 사분면 질량 (여러 pair 합산)"""
    totals = np.zeros((model.config.heads, 2))
    for source, target in pairs:
        x, y = dataset.clouds[source], dataset.clouds[target]
        record = model.predict(x, y, record=True).attention
        for head, xi in enumerate(record[-1]):
            totals[head] += quadrant_masses(xi, len(x))
    return [(float(s), float(c)) for s, c in totals]


# ===== ablation =====

def ablate_heads(
    model: EncoderModel,
    dataset: ShapeDataset,
    pairs: int = 100,
    seed: int = 0,
    normalization: str = "none",
    classification_pairs: int = 4,
    workers: Optional[int] = None,
) -> list[AblationReport]:
    """
    head 위치 i를 모든 층에서 마스킹하고 평가 (h개 리포트)

    파라미터는 바꾸지 않는 추론 시점 마스크다. self/cross 라벨은 마지막 층 ξ로 정한다.
    """
    config = model.config
    baseline = evaluate_testset(
        model, dataset, pairs=pairs, seed=seed, normalization=normalization, workers=workers
    ).mean_error
    masses = _final_layer_masses(model, dataset, sample_pairs(len(dataset), classification_pairs, seed))
    final_specs = model.layout[-1]
    sigmas = model.sigma_values()

    reports = []
    for head in range(config.heads):
        mask = {(layer, head) for layer in range(config.layers)}
        error = evaluate_testset(
            model, dataset, pairs=pairs, seed=seed, normalization=normalization, head_mask=mask, workers=workers
        ).mean_error
        self_mass, cross_mass = masses[head]
        spec = final_specs[head]
        reports.append(AblationReport(
            unit="head",
            index=head,
            mean_error=error,
            baseline_error=baseline,
            label=label_from_masses(self_mass, cross_mass),
            kind=spec.label(),
            sigma=sigmas[spec.sigma_index] if spec.is_gaussian else None,
            self_mass=self_mass,
            cross_mass=cross_mass,
        ))
        logger.info("Head ablated", head=head, mean_error=error, baseline_error=baseline, kind=spec.label())
    return reports


def ablate_layers(
    config: ExperimentConfig,
    dataset: ShapeDataset,
    output_dir: PathLike,
    epochs: Optional[int] = None,
    eval_dataset: Optional[ShapeDataset] = None,
    workers: Optional[int] = None,
) -> list[AblationReport]:
    """
    층 위치별 Gaussian head 배치 ablation

    층 j마다 Gaussian head를 j에만 둔 모델을 새로 짧게 학습하고 평가한다.

    Raises:
        ConfigError: 설정에 Gaussian head가 없음
    """
    if config.model.gaussian_heads == 0 or config.model.head_layout is not None:
        raise ConfigError("layer ablation needs gaussian_heads > 0 and no explicit head_layout")
    output_dir = ensure_dir(output_dir)
    evaluation = config.evaluation
    eval_dataset = eval_dataset or dataset

    reports = []
    for layer in range(config.model.layers):
        tree = config.model_dump()
        tree["model"]["gaussian_layers"] = [layer]
        tree["epochs"] = epochs or config.layer_ablation_epochs
        tree["variant"] = f"{config.variant}.layer{layer}"
        layer_config = ExperimentConfig.model_validate(tree)

        result = train(layer_config, dataset, output_dir / f"layer_{layer}")
        error = evaluate_testset(
            result.model,
            eval_dataset,
            pairs=evaluation.pairs,
            seed=evaluation.seed,
            normalization=evaluation.geodesic_normalization,
            workers=workers,
        ).mean_error
        reports.append(AblationReport(unit="layer", index=layer, mean_error=error))
        logger.info("Layer ablated", layer=layer, mean_error=error)
    return reports


# ===== attention export =====

def attention_support(xi: np.ndarray, threshold: float = SUPPORT_THRESHOLD) -> np.ndarray:
    """행마다 threshold보다 큰 가중치 개수"""
    return (np.atleast_2d(xi) > threshold).sum(axis=1)


def export_attention(
    model: EncoderModel,
    x: PointCloud,
    y: PointCloud,
    layer: int,
    head: int,
    point_index: int,
    directory: PathLike,
    prefix: Optional[str] = None,
) -> tuple[Path, Path]:
    """
    ξ 행렬 CSV와 점 하나의 행 CSV (index, segment, x, y, z, weight)

    Returns:
        (행렬 CSV 경로, 행 CSV 경로)

    Raises:
        AttentionIndexError: layer/head/point 인덱스 범위 초과
    """
    config = model.config
    size = len(x) + 1 + len(y)
    if not 0 <= layer < config.layers:
        raise AttentionIndexError(f"layer {layer} out of range for {config.layers} layers")
    if not 0 <= head < config.heads:
        raise AttentionIndexError(f"head {head} out of range for {config.heads} heads")
    if not 0 <= point_index < size:
        raise AttentionIndexError(f"point {point_index} out of range for {size} rows")

    xi = model.predict(x, y, record=True).attention[layer][head]
    directory = ensure_dir(directory)
    stem = prefix or f"attn_l{layer}_h{head}"
    matrix_path = directory / f"{stem}.csv"
    row_path = directory / f"{stem}_p{point_index}.csv"

    with atomic_write(matrix_path) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        for row in xi:
            writer.writerow([format_float(v) for v in row])

    inputs = concat_inputs(x, y, config.sep_value)
    segments = ["x"] * len(x) + ["sep"] + ["y"] * len(y)
    with atomic_write(row_path) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["index", "segment", "x", "y", "z", "weight"])
        for index, (segment, point, weight) in enumerate(zip(segments, inputs, xi[point_index])):
            writer.writerow([index, segment, *(format_float(c) for c in point), format_float(weight)])

    logger.info(
        "Attention exported",
        layer=layer,
        head=head,
        point=point_index,
        support=int(attention_support(xi[point_index])[0]),
        path=str(matrix_path),
    )
    return matrix_path, row_path


# ===== 리포트 CSV =====

def write_match_reports(reports: Sequence[MatchReport], path: PathLike) -> Path:
    """pair별 요약 CSV"""
    with atomic_write(path) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(MATCH_COLUMNS)
        for r in reports:
            writer.writerow([
                r.pair_id, r.source_index, r.target_index, r.direction,
                format_float(r.chamfer_xy), format_float(r.chamfer_yx), format_float(r.mean_error),
            ])
    return Path(path)


def write_match_errors(reports: Sequence[MatchReport], path: PathLike) -> Path:
    """점별 geodesic 오차 CSV (pair_id, point, error)"""
    with atomic_write(path) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["pair_id", "point", "error"])
        for r in reports:
            for point, error in enumerate(r.errors):
                writer.writerow([r.pair_id, point, format_float(error)])
    return Path(path)


def write_ablation_reports(reports: Sequence[AblationReport], path: PathLike) -> Path:
    """ablation 리포트 CSV"""

    def cell(value: object) -> str:
        if value is None:
            return ""
        if isinstance(value, float):
            return format_float(value)
        return str(value)

    with atomic_write(path) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        for report in reports:
            writer.writerow([cell(getattr(report, column)) for column in ABLATION_COLUMNS])
    return Path(path)
