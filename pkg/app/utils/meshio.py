"""점군/메시 파일 입출력

지원 형식:
- XYZ: 한 줄에 점 하나, 공백 구분 좌표 3개 ('#' 주석, 빈 줄 허용)
- OFF: "OFF" 헤더, "정점수 면수 edge수" 줄, 정점 좌표, 삼각형 면 ("3 i j k")

파싱 오류는 파일 경로와 줄 번호를 담은 ParseError로 보고한다.
"""
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from app.core.errors import DimensionError, DomainError, ContractError, ParseError
from app.core.geometry import MeshRef, PointCloud
from app.utils.files import atomic_write, format_float
from app.utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]


def _content_lines(path: Path) -> Iterator[tuple[int, list[str]]]:
    """(줄 번호, 토큰) 순회 (주석/빈 줄 제외)"""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read file: {e}", path=str(path)) from e
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield number, line.split()


def _parse_floats(tokens: list[str], path: Path, line: int) -> list[float]:
    try:
        values = [float(t) for t in tokens]
    except ValueError as e:
        raise ParseError(f"invalid number: {e}", path=str(path), line=line) from e
    if not all(np.isfinite(values)):
        raise ParseError("non-finite coordinate", path=str(path), line=line)
    return values


def _parse_ints(tokens: list[str], path: Path, line: int) -> list[int]:
    try:
        return [int(t) for t in tokens]
    except ValueError as e:
        raise ParseError(f"invalid integer: {e}", path=str(path), line=line) from e


# ===== XYZ =====

def load_cloud_file(path: PathLike) -> PointCloud:
    """
    XYZ 점군 파일 읽기 (.off이면 메시의 정점만 사용)

    Raises:
        ParseError: 좌표 개수/숫자 형식 오류
    """
    path = Path(path)
    if path.suffix.lower() == ".off":
        return load_mesh_file(path).cloud

    points: list[list[float]] = []
    for line, tokens in _content_lines(path):
        if len(tokens) != 3:
            raise ParseError(f"expected 3 coordinates, got {len(tokens)}", path=str(path), line=line)
        points.append(_parse_floats(tokens, path, line))
    if not points:
        raise ParseError("file has no points", path=str(path))
    return PointCloud(np.array(points))


def write_cloud_file(path: PathLike, cloud: PointCloud) -> Path:
    """XYZ 점군 파일 쓰기 (repr 표기라 읽으면 비트 단위로 같다)"""
    path = Path(path)
    with atomic_write(path) as handle:
        for x, y, z in cloud.points:
            handle.write(f"{format_float(x)} {format_float(y)} {format_float(z)}\n")
    return path


# ===== OFF =====

def load_mesh_file(path: PathLike) -> MeshRef:
    """
    OFF 메시 파일 읽기

    Raises:
        ParseError: 헤더/개수/인덱스 오류 또는 삼각형이 아닌 면
    """
    path = Path(path)
    lines = _content_lines(path)

    header = next(lines, None)
    if header is None:
        raise ParseError("empty file", path=str(path))
    line, tokens = header
    if tokens[0] != "OFF":
        raise ParseError(f"expected 'OFF' header, got {tokens[0]!r}", path=str(path), line=line)
    tokens = tokens[1:]
    if not tokens:
        counts = next(lines, None)
        if counts is None:
            raise ParseError("missing counts line", path=str(path))
        line, tokens = counts
    if len(tokens) < 2:
        raise ParseError("counts line needs vertex and face counts", path=str(path), line=line)
    n_vertices, n_faces = _parse_ints(tokens[:2], path, line)
    if n_vertices < 1 or n_faces < 0:
        raise ParseError(f"invalid counts: {n_vertices} vertices, {n_faces} faces", path=str(path), line=line)

    points = np.empty((n_vertices, 3), dtype=np.float64)
    for k in range(n_vertices):
        entry = next(lines, None)
        if entry is None:
            raise ParseError(f"expected {n_vertices} vertices, found {k}", path=str(path))
        line, tokens = entry
        if len(tokens) != 3:
            raise ParseError(f"expected 3 coordinates, got {len(tokens)}", path=str(path), line=line)
        points[k] = _parse_floats(tokens, path, line)

    triangles = np.empty((n_faces, 3), dtype=np.int64)
    for k in range(n_faces):
        entry = next(lines, None)
        if entry is None:
            raise ParseError(f"expected {n_faces} faces, found {k}", path=str(path))
        line, tokens = entry
        values = _parse_ints(tokens, path, line)
        if values[0] != 3 or len(values) != 4:
            raise ParseError("only triangle faces are supported", path=str(path), line=line)
        if min(values[1:]) < 0 or max(values[1:]) >= n_vertices:
            raise ParseError(f"face index out of range for {n_vertices} vertices", path=str(path), line=line)
        triangles[k] = values[1:]

    extra = next(lines, None)
    if extra is not None:
        raise ParseError("unexpected trailing data", path=str(path), line=extra[0])

    try:
        return MeshRef(PointCloud(points), triangles)
    except (DimensionError, DomainError, ContractError) as e:
        raise ParseError(str(e), path=str(path)) from e


def write_mesh_file(path: PathLike, mesh: MeshRef) -> Path:
    """OFF 메시 파일 쓰기"""
    path = Path(path)
    with atomic_write(path) as handle:
        handle.write("OFF\n")
        handle.write(f"{mesh.n} {len(mesh.triangles)} 0\n")
        for x, y, z in mesh.cloud.points:
            handle.write(f"{format_float(x)} {format_float(y)} {format_float(z)}\n")
        for a, b, c in mesh.triangles:
            handle.write(f"3 {a} {b} {c}\n")
    logger.debug("Mesh written", path=str(path), vertices=mesh.n, faces=len(mesh.triangles))
    return path
