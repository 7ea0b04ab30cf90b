"""구조화된 로깅 설정

CLI 요약 JSON이 stdout을 쓰므로 로그는 항상 stderr로 보낸다.
"""
import logging
import sys
from typing import Any, Optional

import structlog

from app.config import get_settings


def _renderer(level_name: str) -> Any:
    """debug는 사람이 읽는 콘솔 출력, 그 외에는 한 줄 JSON"""
    if level_name == "debug":
        return structlog.dev.ConsoleRenderer()
    return structlog.processors.JSONRenderer(sort_keys=True)


def setup_logging(level: Optional[str] = None) -> None:
    """
    structlog 설정

    Args:
        level: 로그 레벨 이름 (없으면 설정값 LOG_LEVEL)
    """
    level_name = (level or get_settings().log_level).lower()
    numeric_level = getattr(logging, level_name.upper(), logging.INFO)

    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.StackInfoRenderer(),
            structlog.dev.set_exc_info,
            structlog.processors.TimeStamper(fmt="iso"),
            _renderer(level_name),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(numeric_level),
        context_class=dict,
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=True,
    )

    # scipy/numpy 경고 등 표준 logging 출력도 stderr로
    logging.basicConfig(format="%(message)s", stream=sys.stderr, level=numeric_level)


def bind_run_context(**values: Any) -> None:
    """이번 실행의 모든 로그에 붙을 값 (command, out 등), 이전 실행 값은 지운다"""
    structlog.contextvars.clear_contextvars()
    structlog.contextvars.bind_contextvars(**values)


def get_logger(name: str = __name__) -> structlog.BoundLogger:
    """로거 인스턴스 반환"""
    return structlog.get_logger(name)
