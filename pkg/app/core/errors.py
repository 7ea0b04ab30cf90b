"""도메인 예외

라이브러리 코드는 예외를 던지기만 하고, 잡아서 종료 코드로 바꾸는 것은 CLI 경계(app.main)에서만 한다.
builtin 예외도 함께 상속해서 호출자가 ValueError 등으로도 잡을 수 있다.
"""
from typing import Optional


class MatcherError(Exception):
    """모든 도메인 예외의 루트"""


# ===== Tensor =====

class DimensionError(MatcherError, ValueError):
    """shape 불일치"""


class DegenerateRowError(MatcherError, ValueError):
    """softmax 입력 행이 전부 마스킹됨"""


class ContractError(MatcherError, ValueError):
    """호출 계약 위반 (스칼라가 아닌 loss, 전단사가 아닌 순열 등)"""


# ===== Geometry =====

class DomainError(MatcherError, ValueError):
    """값 범위 위반 (sigma <= 0, 음수 표준편차 등)"""


class DegenerateCloudError(MatcherError, ValueError):
    """모든 점이 같은 위치라 정규화할 수 없음"""


class UnreachableVertexError(MatcherError, RuntimeError):
    """메시 edge 그래프가 연결되어 있지 않음"""


# ===== I/O =====

class ParseError(MatcherError, ValueError):
    """점군/메시 파일 파싱 실패"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class CheckpointError(MatcherError, RuntimeError):
    """체크포인트 손상/버전 불일치"""


class ConfigError(MatcherError, ValueError):
    """실험 설정 오류"""


# ===== Training / Evaluation =====

class TrainingDivergedError(MatcherError, RuntimeError):
    """loss가 NaN/Inf가 되어 학습 중단"""

    def __init__(self, message: str, snapshot_path: Optional[str] = None):
        self.snapshot_path = snapshot_path
        super().__init__(message)


class AttentionIndexError(MatcherError, IndexError):
    """layer/head/point 인덱스 범위 초과"""
