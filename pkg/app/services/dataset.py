"""데이터셋 구성

주요 기능:
- 합성 관절 몸체 데이터셋 생성 (템플릿 인덱스가 모든 shape에서 공유됨 → 대응 = 항등)
- 데이터셋 디렉토리 저장/로딩 (manifest.json + shape별 OFF/XYZ 파일)
- epoch 단위 shape 짝짓기와 배치 구성
- 증강: 회전(5가지 중 하나) → 노이즈 → 순열

합성 몸체는 8정점 링으로 만든 튜브 5개(몸통, 팔 2, 다리 2)다.
몸통 튜브에 팔/다리 첫 링을 삼각형으로 이어 붙여 edge 그래프가 항상 연결되게 한다.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from app.config import get_settings
from app.core.errors import ContractError, DimensionError, ParseError
from app.core.geometry import (
    ROTATION_MODES,
    Correspondence,
    MeshRef,
    PointCloud,
    apply_permutation,
    inject_noise,
    normalize,
    random_rotation,
    rotate,
)
from app.core.models import AugmentPolicy, DatasetManifest
from app.utils.files import atomic_write_text, ensure_dir
from app.utils.logger import get_logger
from app.utils.meshio import load_cloud_file, load_mesh_file, write_cloud_file, write_mesh_file

logger = get_logger(__name__)

PathLike = Union[str, Path]

# ===== 합성 몸체 템플릿 상수 =====

# 링 하나의 정점 수
RING_SIZE = 8
# 팔다리를 붙이기 위한 최소 링 수 (이보다 적으면 몸통만)
MIN_RINGS_FOR_LIMBS = 10
# 뼈 길이 배율 범위 (1 ± scale·0.15)
BONE_LENGTH_RANGE = 0.15
# 매니페스트 스키마 버전
DATASET_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class ChainTemplate:
    """튜브 하나의 휴지 자세 (뼈 방향/길이, 반지름, 부착 위치)"""
    name: str
    directions: tuple[tuple[float, float, float], ...]
    lengths: tuple[float, ...]
    radius: tuple[float, float]
    attach_at: float
    anchor_offset: tuple[float, float, float]
    joint_range: float


SPINE = ChainTemplate(
    name="spine",
    directions=((0.0, 1.0, 0.0),) * 3,
    lengths=(0.45, 0.45, 0.3),
    radius=(0.16, 0.08),
    attach_at=0.0,
    anchor_offset=(0.0, 0.0, 0.0),
    joint_range=0.35,
)

LIMBS = (
    ChainTemplate("left_arm", ((1.0, 0.0, 0.0),) * 2, (0.35, 0.3), (0.06, 0.04), 0.72, (0.18, 0.0, 0.0), 1.0),
    ChainTemplate("right_arm", ((-1.0, 0.0, 0.0),) * 2, (0.35, 0.3), (0.06, 0.04), 0.72, (-0.18, 0.0, 0.0), 1.0),
    ChainTemplate("left_leg", ((0.0, -1.0, 0.0),) * 2, (0.45, 0.45), (0.08, 0.05), 0.0, (0.1, -0.05, 0.0), 0.7),
    ChainTemplate("right_leg", ((0.0, -1.0, 0.0),) * 2, (0.45, 0.45), (0.08, 0.05), 0.0, (-0.1, -0.05, 0.0), 0.7),
)


# ===== 타입 =====

@dataclass
class ShapeDataset:
    """템플릿 인덱스를 공유하는 점군 묶음 (i번 점은 모든 shape에서 대응)"""
    clouds: list[PointCloud]
    meshes: Optional[list[MeshRef]] = None
    name: str = "dataset"
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.clouds:
            raise ContractError("dataset needs at least one cloud")
        sizes = {len(c) for c in self.clouds}
        if len(sizes) != 1:
            raise DimensionError(f"all clouds must share one size, got {sorted(sizes)}")
        if self.meshes is not None and len(self.meshes) != len(self.clouds):
            raise DimensionError(f"{len(self.meshes)} meshes for {len(self.clouds)} clouds")

    def __len__(self) -> int:
        return len(self.clouds)

    @property
    def n(self) -> int:
        return len(self.clouds[0])

    @property
    def has_mesh(self) -> bool:
        return self.meshes is not None

    def mesh(self, index: int) -> MeshRef:
        if self.meshes is None:
            raise ContractError(f"dataset {self.name!r} has no mesh connectivity")
        return self.meshes[index]


@dataclass(frozen=True)
class Couple:
    """학습/평가용 shape 쌍 (corr는 X → Y 정답 대응)"""
    x: PointCloud
    y: PointCloud
    corr: Correspondence
    source_index: int = -1
    target_index: int = -1


@dataclass
class TrainBatch:
    """배치 하나 (B개 shape → B/2 couple)"""
    couples: list[Couple]

    def __len__(self) -> int:
        return len(self.couples)


# ===== 합성 몸체 =====

def axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues 회전 행렬"""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _perpendicular_basis(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    direction = np.asarray(direction, dtype=np.float64)
    helper = np.array([0.0, 0.0, 1.0]) if abs(direction[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(direction, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(direction, u)


@dataclass(frozen=True)
class ChainPose:
    """튜브 하나의 자세 (뼈별 시작점, 누적 회전, 길이 배율)"""
    template: ChainTemplate
    joints: np.ndarray
    rotations: np.ndarray
    length_scale: np.ndarray

    def locate(self, fraction: float) -> tuple[np.ndarray, np.ndarray, int]:
        """휴지 길이 기준 위치 fraction ∈ [0,1] → (중심, 회전, 뼈 인덱스)"""
        lengths = np.asarray(self.template.lengths)
        bounds = np.concatenate([[0.0], np.cumsum(lengths)])
        target = fraction * bounds[-1]
        bone = int(min(np.searchsorted(bounds, target, side="right") - 1, len(lengths) - 1))
        local = (target - bounds[bone]) / lengths[bone]
        direction = np.asarray(self.template.directions[bone])
        rotation = self.rotations[bone]
        center = self.joints[bone] + rotation @ direction * (local * lengths[bone] * self.length_scale[bone])
        return center, rotation, bone


def _pose_chain(
    template: ChainTemplate,
    origin: np.ndarray,
    base_rotation: np.ndarray,
    angles: np.ndarray,
    length_scale: np.ndarray,
) -> ChainPose:
    """뼈마다 x/z축 관절 회전을 누적해 자세를 만든다 (자식은 부모 회전을 상속)"""
    rotation = base_rotation
    position = np.asarray(origin, dtype=np.float64)
    joints = []
    rotations = []
    x_axis, z_axis = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
    for bone, direction in enumerate(template.directions):
        rotation = rotation @ axis_angle(x_axis, angles[bone, 0]) @ axis_angle(z_axis, angles[bone, 1])
        joints.append(position)
        rotations.append(rotation)
        position = position + rotation @ np.asarray(direction) * (template.lengths[bone] * length_scale[bone])
    return ChainPose(template, np.array(joints), np.array(rotations), np.asarray(length_scale))


def _ring_vertices(pose: ChainPose, rings: int) -> np.ndarray:
    """튜브를 따라 rings개 링 정점 [rings·8 × 3]"""
    phases = 2.0 * np.pi * np.arange(RING_SIZE) / RING_SIZE
    r0, r1 = pose.template.radius
    vertices = []
    for k in range(rings):
        fraction = k / (rings - 1)
        center, rotation, bone = pose.locate(fraction)
        u, w = _perpendicular_basis(pose.template.directions[bone])
        radius = r0 + (r1 - r0) * fraction
        ring = center + radius * (np.outer(np.cos(phases), rotation @ u) + np.outer(np.sin(phases), rotation @ w))
        vertices.append(ring)
    return np.concatenate(vertices, axis=0)


def _tube_triangles(first: int, rings: int) -> list[tuple[int, int, int]]:
    triangles = []
    for k in range(rings - 1):
        triangles.extend(_zip_triangles(first + k * RING_SIZE, first + (k + 1) * RING_SIZE))
    return triangles


def _zip_triangles(ring_a: int, ring_b: int) -> list[tuple[int, int, int]]:
    """두 링 사이 띠 (사각형 하나당 삼각형 둘)"""
    triangles = []
    for a in range(RING_SIZE):
        b = (a + 1) % RING_SIZE
        triangles.append((ring_a + a, ring_a + b, ring_b + b))
        triangles.append((ring_a + a, ring_b + b, ring_b + a))
    return triangles


@dataclass(frozen=True)
class BodyTopology:
    """정점 배치와 삼각형 (seed와 n으로만 정해지며 모든 shape가 공유)"""
    spine_rings: int
    limb_rings: int
    triangles: np.ndarray
    splits: tuple[tuple[int, int, int], ...]

    @property
    def has_limbs(self) -> bool:
        return self.limb_rings > 0


def body_topology(n: int, seed: int) -> BodyTopology:
    """
    n개 정점의 몸체 연결 구조

    링 R = n // 8개를 몸통/팔다리에 나누고, 남는 n - 8R개 정점은
    seed로 고른 삼각형의 무게중심 분할로 채운다.
    """
    rings = n // RING_SIZE
    if rings >= MIN_RINGS_FOR_LIMBS:
        limb_rings = max(2, rings // 6)
        spine_rings = rings - len(LIMBS) * limb_rings
    else:
        limb_rings = 0
        spine_rings = rings

    triangles = _tube_triangles(0, spine_rings)
    if limb_rings:
        first = spine_rings * RING_SIZE
        for limb in LIMBS:
            attach_ring = int(round(limb.attach_at * (spine_rings - 1)))
            triangles.extend(_zip_triangles(attach_ring * RING_SIZE, first))
            triangles.extend(_tube_triangles(first, limb_rings))
            first += limb_rings * RING_SIZE

    rng = np.random.default_rng([seed])
    splits = []
    next_vertex = rings * RING_SIZE
    for _ in range(n - rings * RING_SIZE):
        chosen = int(rng.integers(len(triangles)))
        a, b, c = triangles[chosen]
        splits.append((a, b, c))
        triangles[chosen] = (a, b, next_vertex)
        triangles.append((b, c, next_vertex))
        triangles.append((c, a, next_vertex))
        next_vertex += 1

    return BodyTopology(
        spine_rings=spine_rings,
        limb_rings=limb_rings,
        triangles=np.array(triangles, dtype=np.int64),
        splits=tuple(splits),
    )


def _sample_deformation(rng: np.random.Generator, scale: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """튜브별 (관절 각도 [뼈×2], 뼈 길이 배율 [뼈])"""
    params = []
    for chain in (SPINE, *LIMBS):
        bones = len(chain.lengths)
        angles = scale * rng.uniform(-chain.joint_range, chain.joint_range, size=(bones, 2))
        lengths = 1.0 + scale * rng.uniform(-BONE_LENGTH_RANGE, BONE_LENGTH_RANGE, size=bones)
        params.append((angles, lengths))
    return params


def pose_body(topology: BodyTopology, deformation: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """변형 파라미터로 몸체 정점 좌표 계산 (정규화 이전)"""
    (spine_angles, spine_lengths), *limb_params = deformation
    spine = _pose_chain(SPINE, np.zeros(3), np.eye(3), spine_angles, spine_lengths)
    parts = [_ring_vertices(spine, topology.spine_rings)]
    if topology.has_limbs:
        for limb, (angles, lengths) in zip(LIMBS, limb_params):
            anchor, rotation, _ = spine.locate(limb.attach_at)
            origin = anchor + rotation @ np.asarray(limb.anchor_offset)
            pose = _pose_chain(limb, origin, rotation, angles, lengths)
            parts.append(_ring_vertices(pose, topology.limb_rings))
    vertices = np.concatenate(parts, axis=0)
    if topology.splits:
        extra = np.empty((len(topology.splits), 3))
        vertices = np.concatenate([vertices, extra], axis=0)
        first = len(vertices) - len(topology.splits)
        for k, (a, b, c) in enumerate(topology.splits):
            vertices[first + k] = (vertices[a] + vertices[b] + vertices[c]) / 3.0
    return vertices


def _build_mesh(topology: BodyTopology, vertices: np.ndarray) -> MeshRef:
    return MeshRef(normalize(PointCloud(vertices)), topology.triangles)


def template_shape(n: int, seed: int = 0) -> MeshRef:
    """변형 없는 템플릿 몸체 (정규화됨)"""
    topology = body_topology(n, seed)
    rest = [
        (np.zeros((len(chain.lengths), 2)), np.ones(len(chain.lengths)))
        for chain in (SPINE, *LIMBS)
    ]
    return _build_mesh(topology, pose_body(topology, rest))


def generate_synthetic_dataset(
    count: int,
    n: int,
    seed: int = 0,
    deformation_scale: float = 1.0,
    name: Optional[str] = None,
) -> ShapeDataset:
    """
    합성 관절 몸체 데이터셋

    shape k는 default_rng([seed, k])로 관절 각도 (±범위·scale)와 뼈 길이 배율을 뽑는다.
    deformation_scale=0이면 모든 shape가 템플릿과 같다.

    Raises:
        ContractError: count < 2 또는 n < 16
    """
    if count < 2 or n < 16:
        raise ContractError(f"synthetic dataset needs count >= 2 and n >= 16, got count={count}, n={n}")
    topology = body_topology(n, seed)
    meshes = []
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        deformation = _sample_deformation(rng, deformation_scale)
        meshes.append(_build_mesh(topology, pose_body(topology, deformation)))

    dataset = ShapeDataset(
        clouds=[mesh.cloud for mesh in meshes],
        meshes=meshes,
        name=name or f"synthetic-{count}x{n}-s{seed}",
        seed=seed,
    )
    logger.info(
        "Synthetic dataset generated",
        count=count,
        n=n,
        seed=seed,
        limbs=topology.has_limbs,
        triangles=len(topology.triangles),
    )
    return dataset


# ===== 저장/로딩 =====

def save_dataset(dataset: ShapeDataset, directory: PathLike, generator: Optional[dict] = None) -> Path:
    """shape별 OFF(메시) 또는 XYZ 파일 + manifest.json"""
    directory = ensure_dir(directory)
    suffix = ".off" if dataset.has_mesh else ".xyz"
    files = []
    for index, cloud in enumerate(dataset.clouds):
        filename = f"shape_{index:05d}{suffix}"
        if dataset.has_mesh:
            write_mesh_file(directory / filename, dataset.mesh(index))
        else:
            write_cloud_file(directory / filename, cloud)
        files.append(filename)

    manifest = DatasetManifest(
        schema_version=DATASET_SCHEMA_VERSION,
        name=dataset.name,
        count=len(dataset),
        n=dataset.n,
        seed=dataset.seed,
        has_mesh=dataset.has_mesh,
        files=files,
        generator=generator,
    )
    atomic_write_text(directory / MANIFEST_NAME, manifest.model_dump_json(indent=2) + "\n")
    logger.info("Dataset saved", path=str(directory), count=len(dataset), n=dataset.n)
    return directory


def load_dataset(directory: PathLike) -> ShapeDataset:
    """
    데이터셋 디렉토리 로딩

    manifest.json이 없으면 이름순 *.off 파일 (없으면 *.xyz)을 읽는다.

    Raises:
        ParseError: 매니페스트 손상, 스키마 버전 불일치, 파일 파싱 실패
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if manifest_path.is_file():
        try:
            manifest = DatasetManifest.model_validate(json.loads(manifest_path.read_text(encoding="utf-8")))
        except ValueError as e:
            raise ParseError(f"invalid dataset manifest: {e}", path=str(manifest_path)) from e
        if manifest.schema_version != DATASET_SCHEMA_VERSION:
            raise ParseError(
                f"unsupported dataset schema_version {manifest.schema_version} "
                f"(expected {DATASET_SCHEMA_VERSION})",
                path=str(manifest_path),
            )
        paths = [directory / name for name in manifest.files]
        name, seed = manifest.name, manifest.seed
    else:
        paths = sorted(directory.glob("*.off")) or sorted(directory.glob("*.xyz"))
        if not paths:
            raise ParseError("no manifest.json, .off or .xyz files found", path=str(directory))
        name, seed = directory.name, None

    with_mesh = all(p.suffix.lower() == ".off" for p in paths)
    if with_mesh:
        meshes = [load_mesh_file(p) for p in paths]
        clouds = [m.cloud for m in meshes]
    else:
        meshes = None
        clouds = [load_cloud_file(p) for p in paths]

    dataset = ShapeDataset(clouds=clouds, meshes=meshes, name=name, seed=seed)
    logger.info("Dataset loaded", path=str(directory), count=len(dataset), n=dataset.n, mesh=with_mesh)
    return dataset


# ===== 증강 =====

def augment_pair(
    x: PointCloud,
    y: PointCloud,
    corr: Correspondence,
    policy: AugmentPolicy,
    rng: np.random.Generator,
) -> tuple[PointCloud, PointCloud, Correspondence]:
    """
    couple 증강

    각 shape에 독립적으로: 5가지 회전 중 하나 → 노이즈 (정책이 있으면) → 무작위 순열.
    대응은 순열에 맞게 다시 인덱싱된다.
    """
    if policy.rotate:
        x = rotate(x, random_rotation(ROTATION_MODES[rng.integers(len(ROTATION_MODES))], rng))
        y = rotate(y, random_rotation(ROTATION_MODES[rng.integers(len(ROTATION_MODES))], rng))
    if policy.noise is not None:
        x = inject_noise(x, policy.noise.fraction, policy.noise.stddev, rng)
        y = inject_noise(y, policy.noise.fraction, policy.noise.stddev, rng)
    if policy.permute:
        x, corr = apply_permutation(x, corr, rng.permutation(len(x)), side="source")
        y, corr = apply_permutation(y, corr, rng.permutation(len(y)), side="target")
    return x, y, corr


# ===== 짝짓기/배치 =====

def epoch_batches(dataset_size: int, batch_shapes: int, seed: int, epoch: int) -> list[np.ndarray]:
    """
    epoch 하나의 배치별 shape 인덱스

    epoch마다 순열을 새로 뽑아 batch_shapes개씩 자른다 (비복원 짝짓기).
    마지막 배치는 짝수 개로 줄이고 2개 미만이면 버린다.

    Raises:
        ContractError: 데이터셋이 batch_shapes보다 작음
    """
    if dataset_size < batch_shapes:
        raise ContractError(f"dataset has {dataset_size} shapes, fewer than batch_shapes={batch_shapes}")
    order = np.random.default_rng([seed, epoch]).permutation(dataset_size)
    batches = []
    for start in range(0, dataset_size, batch_shapes):
        chunk = order[start:start + batch_shapes]
        chunk = chunk[: len(chunk) - len(chunk) % 2]
        if len(chunk) >= 2:
            batches.append(chunk)
    return batches


def build_batch(
    dataset: ShapeDataset,
    indices: Sequence[int],
    policy: AugmentPolicy,
    rng: np.random.Generator,
) -> TrainBatch:
    """연속한 두 shape씩 couple로 묶고 증강"""
    couples = []
    for a, b in zip(indices[0::2], indices[1::2]):
        x, y = dataset.clouds[int(a)], dataset.clouds[int(b)]
        x, y, corr = augment_pair(x, y, Correspondence.identity(dataset.n), policy, rng)
        couples.append(Couple(x=x, y=y, corr=corr, source_index=int(a), target_index=int(b)))
    return TrainBatch(couples)


def iterate_batches(
    dataset: ShapeDataset,
    batch_shapes: int,
    policy: AugmentPolicy,
    seed: int,
    epoch: int,
    prefetch: Optional[bool] = None,
) -> Iterator[TrainBatch]:
    """
    epoch 배치 순회

    배치 b의 증강 난수는 default_rng([seed, epoch, b])라 prefetch 여부와 무관하게 같다.
    prefetch이면 다음 배치를 스레드 하나에서 미리 만든다.
    """
    if prefetch is None:
        prefetch = get_settings().prefetch_batches
    chunks = epoch_batches(len(dataset), batch_shapes, seed, epoch)

    def make(index: int) -> TrainBatch:
        return build_batch(dataset, chunks[index], policy, np.random.default_rng([seed, epoch, index]))

    if not prefetch:
        for index in range(len(chunks)):
            yield make(index)
        return

    with ThreadPoolExecutor(max_workers=1) as executor:
        pending = executor.submit(make, 0)
        for index in range(len(chunks)):
            batch = pending.result()
            if index + 1 < len(chunks):
                pending = executor.submit(make, index + 1)
            yield batch
