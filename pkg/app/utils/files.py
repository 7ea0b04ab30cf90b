"""파일 처리 유틸리티

주요 기능:
- 파일명 정규화/살균 (변형 이름 → 출력 파일명)
- 출력 디렉토리 보장
- 원자적 쓰기 (임시 파일 → rename)
- CSV용 실수 포맷팅
"""
import os
import re
import tempfile
import unicodedata
from contextlib import contextmanager
from pathlib import Path
from typing import IO, Iterator, Union


PathLike = Union[str, Path]

# 파일명에서 제거할 위험 문자
DANGEROUS_CHARS = re.compile(r'[<>:"/\\|?*\x00-\x1f]')

# 연속 공백/언더스코어 정리
MULTIPLE_SPACES = re.compile(r'[\s_]+')


def sanitize_filename(filename: str, max_length: int = 255) -> str:
    """
    변형 이름/subcommand → 출력 파일명

    NFC 정규화 후 경로 구분자와 위험 문자를 "_"로 바꾸고 앞뒤 점/공백을 없앤다.
    예: "../4gh.lis" → "4gh.lis", "eval:run?" → "eval_run"

    Args:
        filename: 원본 이름
        max_length: 최대 길이

    Returns:
        파일명 (비면 "unnamed")
    """
    cleaned = DANGEROUS_CHARS.sub("_", unicodedata.normalize("NFC", filename or ""))
    cleaned = MULTIPLE_SPACES.sub("_", cleaned).strip(" ._")
    return cleaned[:max_length] or "unnamed"


def ensure_dir(path: PathLike) -> Path:
    """디렉토리가 없으면 만든다"""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


@contextmanager
def atomic_write(path: PathLike, mode: str = "w") -> Iterator[IO]:
    """
    같은 디렉토리의 임시 파일에 쓰고 성공하면 rename

    실패하면 임시 파일을 지우고 대상 파일은 건드리지 않는다.

    Args:
        path: 최종 경로
        mode: "w" (텍스트) 또는 "wb" (바이너리)
    """
    target = Path(path)
    ensure_dir(target.parent)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    try:
        if "b" in mode:
            handle = os.fdopen(fd, mode)
        else:
            handle = os.fdopen(fd, mode, encoding="utf-8", newline="")
        with handle:
            yield handle
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: PathLike, text: str) -> Path:
    """텍스트 파일 원자적 쓰기"""
    with atomic_write(path, "w") as handle:
        handle.write(text)
    return Path(path)


def format_float(value: float) -> str:
    """CSV용 실수 표기 (round-trip 가능한 repr)"""
    return repr(float(value))
