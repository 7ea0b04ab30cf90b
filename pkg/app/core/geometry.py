"""점군/메시 기하 연산

주요 기능:
- 정규화 (중심 이동 + 단위 구 스케일)
- 블록 거리 행렬 E 와 Gaussian 에너지
- 강체 회전, 순열, 노이즈 주입 (증강)
- chamfer 거리, 최근접 매칭, 메시 edge 그래프 위 geodesic (Dijkstra)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Literal, Optional, Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial.distance import cdist

from app.core.errors import (
    ContractError,
    DegenerateCloudError,
    DimensionError,
    DomainError,
    UnreachableVertexError,
)
from app.core.tensor import MASKED, Tensor, exp, masked_fill, mul, reciprocal


# 0 길이 edge가 희소 그래프에서 사라지지 않도록 하는 하한
MIN_EDGE_LENGTH = 1e-12


# ===== 타입 =====

@dataclass(frozen=True, eq=False)
class PointCloud:
    """순서 있는 3D 점 집합 [n×3]"""
    points: np.ndarray

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 1:
            raise DimensionError(f"point cloud must be [n×3] with n >= 1, got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise DomainError("point cloud has non-finite coordinates")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def n(self) -> int:
        return len(self)


@dataclass(frozen=True, eq=False)
class Correspondence:
    """정답 대응 π: X 인덱스 i → Y 인덱스 pairs[i]"""
    pairs: np.ndarray

    def __post_init__(self) -> None:
        pairs = np.array(self.pairs, dtype=np.int64).reshape(-1)
        if not _is_permutation(pairs):
            raise ContractError("correspondence must be a bijection over 0..n-1")
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)

    @classmethod
    def identity(cls, n: int) -> "Correspondence":
        return cls(np.arange(n))

    def __len__(self) -> int:
        return int(self.pairs.size)

    def inverse(self) -> "Correspondence":
        return Correspondence(np.argsort(self.pairs))


@dataclass(frozen=True, eq=False)
class MeshRef:
    """점군 + 삼각형 연결 정보 (geodesic 평가 전용)"""
    cloud: PointCloud
    triangles: np.ndarray
    _graph: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        triangles = np.array(self.triangles, dtype=np.int64)
        if triangles.size == 0:
            triangles = triangles.reshape(0, 3)
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise DimensionError(f"triangles must be [m×3], got shape {triangles.shape}")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(self.cloud)):
            raise ContractError(f"triangle index out of range for {len(self.cloud)} vertices")
        triangles.setflags(write=False)
        object.__setattr__(self, "triangles", triangles)

    @property
    def n(self) -> int:
        return len(self.cloud)

    def edges(self) -> np.ndarray:
        """중복 없는 무방향 edge [k×2] (작은 인덱스 먼저)"""
        if not self.triangles.size:
            return np.empty((0, 2), dtype=np.int64)
        t = self.triangles
        pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
        pairs = np.sort(pairs, axis=1)
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        return np.unique(pairs, axis=0)

    def edge_graph(self) -> csr_matrix:
        """유클리드 edge 길이를 가중치로 하는 희소 인접 행렬 (캐시)"""
        graph = self._graph.get("csr")
        if graph is None:
            edges = self.edges()
            points = self.cloud.points
            weights = np.linalg.norm(points[edges[:, 0]] - points[edges[:, 1]], axis=1)
            weights = np.maximum(weights, MIN_EDGE_LENGTH)
            graph = csr_matrix((weights, (edges[:, 0], edges[:, 1])), shape=(self.n, self.n))
            self._graph["csr"] = graph
        return graph

    def is_connected(self) -> bool:
        count, _ = connected_components(self.edge_graph(), directed=False)
        return count == 1

    def surface_area(self) -> float:
        p = self.cloud.points
        t = self.triangles
        cross = np.cross(p[t[:, 1]] - p[t[:, 0]], p[t[:, 2]] - p[t[:, 0]])
        return float(0.5 * np.linalg.norm(cross, axis=1).sum())

    def permuted(self, perm: np.ndarray) -> "MeshRef":
        """apply_permutation과 같은 규약으로 정점 순서를 바꾼다 (새 i번 = 기존 perm[i]번)"""
        perm = np.asarray(perm, dtype=np.int64)
        if perm.size != self.n or not _is_permutation(perm):
            raise ContractError("mesh permutation must be a bijection over its vertices")
        inverse = np.argsort(perm)
        return MeshRef(PointCloud(self.cloud.points[perm]), inverse[self.triangles])


@dataclass(frozen=True, eq=False)
class BlockDistanceMatrix:
    """[X | SEP | Y] 순서의 (n_X+1+n_Y)² 거리 행렬

    같은 shape 안의 블록만 유클리드 거리를 갖고 나머지는 0이다.
    """
    values: np.ndarray
    n_x: int
    n_y: int

    @property
    def size(self) -> int:
        return self.n_x + 1 + self.n_y

    @property
    def sep_index(self) -> int:
        return self.n_x

    @property
    def same_shape_mask(self) -> np.ndarray:
        """X↔X, Y↔Y, SEP↔SEP 위치가 True"""
        segment = np.concatenate([
            np.zeros(self.n_x, dtype=np.int8),
            np.ones(1, dtype=np.int8),
            np.full(self.n_y, 2, dtype=np.int8),
        ])
        return segment[:, None] == segment[None, :]


class RotationMode(str, Enum):
    """증강 회전 종류"""
    ALL_AXES = "all_axes"
    X = "x"
    Y = "y"
    Z = "z"
    NONE = "none"


ROTATION_MODES: tuple[RotationMode, ...] = tuple(RotationMode)


def _is_permutation(perm: np.ndarray) -> bool:
    n = perm.size
    if n == 0:
        return False
    seen = np.zeros(n, dtype=bool)
    if perm.min() < 0 or perm.max() >= n:
        return False
    seen[perm] = True
    return bool(seen.all())


# ===== 전처리 =====

def normalize(cloud: PointCloud) -> PointCloud:
    """중심을 원점으로, 중심에서 가장 먼 점까지 거리를 1로

    Raises:
        DegenerateCloudError: 모든 점이 같은 위치 (n=1 포함)
    """
    centered = cloud.points - cloud.points.mean(axis=0)
    radius = float(np.linalg.norm(centered, axis=1).max())
    if len(cloud) < 2 or radius == 0.0:
        raise DegenerateCloudError("cannot normalize a cloud whose points all coincide")
    return PointCloud(centered / radius)


# ===== 거리 행렬 / Gaussian 에너지 =====

def block_distance_matrix(x: PointCloud, y: PointCloud) -> BlockDistanceMatrix:
    """블록 거리 행렬 E

    크기가 다른 두 점군도 같은 레이아웃으로 처리한다.
    """
    n_x, n_y = len(x), len(y)
    size = n_x + 1 + n_y
    values = np.zeros((size, size), dtype=np.float64)
    values[:n_x, :n_x] = cdist(x.points, x.points)
    values[n_x + 1:, n_x + 1:] = cdist(y.points, y.points)
    np.fill_diagonal(values, 0.0)
    values.setflags(write=False)
    return BlockDistanceMatrix(values=values, n_x=n_x, n_y=n_y)


def gaussian_energy(
    distances: BlockDistanceMatrix,
    sigma: Union[float, Tensor],
    literal_cross: bool = False,
) -> Tensor:
    """softmax 이전 Gaussian 에너지 exp(-E²/2σ²)

    같은 shape 밖의 원소(교차 블록, SEP↔점)는 MASKED. literal_cross이면 마스킹하지 않는다 (E=0 → 1).
    sigma가 requires_grad 텐서면 결과는 sigma에 대해 미분 가능하다.

    Raises:
        DomainError: sigma <= 0
    """
    if isinstance(sigma, Tensor):
        if sigma.size != 1 or not float(sigma.data.reshape(-1)[0]) > 0.0:
            raise DomainError(f"sigma must be a positive scalar, got {sigma.data}")
    else:
        if not float(sigma) > 0.0:
            raise DomainError(f"sigma must be positive, got {sigma}")
        sigma = Tensor(float(sigma))

    half_sq = Tensor(-0.5 * distances.values * distances.values)
    energy = exp(mul(half_sq, reciprocal(mul(sigma, sigma))))
    if literal_cross:
        return energy
    return masked_fill(energy, ~distances.same_shape_mask, MASKED)


# ===== 증강 =====

def rotation_about(axis: Literal["x", "y", "z"], angle: float) -> np.ndarray:
    """좌표축 기준 회전 행렬"""
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == "y":
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == "z":
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise DomainError(f"unknown rotation axis: {axis}")


def random_rotation(mode: Union[RotationMode, str], rng: np.random.Generator) -> np.ndarray:
    """5가지 증강 회전 중 하나 (각도는 [0, 2π) 균등)"""
    mode = RotationMode(mode)
    if mode == RotationMode.NONE:
        return np.eye(3)
    if mode == RotationMode.ALL_AXES:
        ax = rng.uniform(0.0, 2.0 * np.pi)
        ay = rng.uniform(0.0, 2.0 * np.pi)
        az = rng.uniform(0.0, 2.0 * np.pi)
        return rotation_about("z", az) @ rotation_about("y", ay) @ rotation_about("x", ax)
    return rotation_about(mode.value, rng.uniform(0.0, 2.0 * np.pi))


def rotate(cloud: PointCloud, rotation: np.ndarray) -> PointCloud:
    return PointCloud(cloud.points @ np.asarray(rotation).T)


def apply_permutation(
    cloud: PointCloud,
    corr: Correspondence,
    perm: np.ndarray,
    side: Literal["source", "target"] = "source",
) -> tuple[PointCloud, Correspondence]:
    """점 순서를 바꾸고 대응을 다시 인덱싱한다

    새 k번 점 = 기존 perm[k]번 점. side는 cloud가 대응의 source(X)인지 target(Y)인지.

    Raises:
        ContractError: perm이 전단사가 아님
    """
    perm = np.asarray(perm, dtype=np.int64).reshape(-1)
    if perm.size != len(cloud) or not _is_permutation(perm):
        raise ContractError("permutation must be a bijection over the cloud's points")
    permuted = PointCloud(cloud.points[perm])
    if side == "source":
        return permuted, Correspondence(corr.pairs[perm])
    inverse = np.argsort(perm)
    return permuted, Correspondence(inverse[corr.pairs])


def inject_noise(
    cloud: PointCloud,
    fraction: float,
    stddev: float,
    rng: np.random.Generator,
) -> PointCloud:
    """⌊fraction·n⌋개 점에 N(0, stddev²) 노이즈를 좌표별로 더한다

    Raises:
        DomainError: fraction이 [0, 1] 밖이거나 stddev < 0
    """
    if not 0.0 <= fraction <= 1.0:
        raise DomainError(f"noise fraction must be in [0, 1], got {fraction}")
    if stddev < 0.0:
        raise DomainError(f"noise stddev must be >= 0, got {stddev}")
    count = int(np.floor(fraction * len(cloud)))
    if count == 0 or stddev == 0.0:
        return cloud
    chosen = rng.choice(len(cloud), size=count, replace=False)
    points = cloud.points.copy()
    points[chosen] += rng.normal(0.0, stddev, size=(count, 3))
    return PointCloud(points)


# ===== 평가 지표 =====

def chamfer(a: PointCloud, b: PointCloud) -> float:
    """양방향 최근접 제곱거리 평균의 합"""
    squared = cdist(a.points, b.points, metric="sqeuclidean")
    return float(squared.min(axis=1).mean() + squared.min(axis=0).mean())


def nearest_neighbor_match(mapped: PointCloud, target: PointCloud) -> np.ndarray:
    """mapped 각 점의 target 최근접 인덱스 (동률이면 작은 인덱스)"""
    squared = cdist(mapped.points, target.points, metric="sqeuclidean")
    return np.argmin(squared, axis=1)


def geodesic_rows(mesh: MeshRef, sources: np.ndarray) -> np.ndarray:
    """여러 source에서의 edge 그래프 최단거리 [len(sources)×n]

    Raises:
        UnreachableVertexError: 도달할 수 없는 정점이 있음
    """
    sources = np.asarray(sources, dtype=np.int64).reshape(-1)
    if sources.size and (sources.min() < 0 or sources.max() >= mesh.n):
        raise ContractError(f"geodesic source out of range for {mesh.n} vertices")
    rows = dijkstra(mesh.edge_graph(), directed=False, indices=sources)
    rows = np.atleast_2d(rows)
    if not np.all(np.isfinite(rows)):
        raise UnreachableVertexError("mesh edge graph is disconnected; geodesic undefined")
    return rows


def geodesic_distances(mesh: MeshRef, source: int) -> np.ndarray:
    """한 source에서의 geodesic 거리 (Dijkstra, 유클리드 edge 가중치)"""
    return geodesic_rows(mesh, np.array([source]))[0]


def surface_scale(mesh: MeshRef, normalization: Optional[str]) -> float:
    """geodesic 오차 정규화 계수 (none → 1, sqrt_area → √면적)"""
    if normalization in (None, "none"):
        return 1.0
    if normalization == "sqrt_area":
        area = mesh.surface_area()
        if area <= 0.0:
            raise DomainError("mesh has zero surface area")
        return float(np.sqrt(area))
    raise DomainError(f"unknown geodesic normalization: {normalization}")
