"""실험 설정 로딩

TOML 설정 트리 → --set 오버라이드 병합 → ExperimentConfig 검증.
작업을 시작하기 전에 트리 전체를 검증하므로 잘못된 키/값은 실행 전에 거부된다.
"""
import copy
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Optional, Sequence, Union

from pydantic import ValidationError

from app.core.errors import ConfigError
from app.core.models import ExperimentConfig
from app.utils.logger import get_logger

logger = get_logger(__name__)

# 패키지에 포함된 변형 프리셋 디렉토리
PRESET_DIR = Path(__file__).resolve().parent.parent / "presets"
PRESET_SUFFIX = ".toml"


def preset_names() -> list[str]:
    """사용 가능한 프리셋 이름 (0gh, 4gh, 4gh.lis, ...)"""
    return sorted(p.name[: -len(PRESET_SUFFIX)] for p in PRESET_DIR.glob(f"*{PRESET_SUFFIX}"))


def resolve_config_path(config: Union[str, Path]) -> Path:
    """
    경로 또는 프리셋 이름 → 설정 파일 경로

    Raises:
        ConfigError: 파일도 프리셋도 없음
    """
    path = Path(config)
    if path.is_file():
        return path
    preset = PRESET_DIR / f"{config}{PRESET_SUFFIX}"
    if preset.is_file():
        return preset
    raise ConfigError(f"config not found: {config} (presets: {', '.join(preset_names())})")


def read_config_tree(path: Union[str, Path]) -> dict[str, Any]:
    """TOML 파일 → dict"""
    path = Path(path)
    try:
        with path.open("rb") as handle:
            return tomllib.load(handle)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML: {e}") from e
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e}") from e


def parse_override(text: str) -> tuple[list[str], Any]:
    """
    "a.b.c=value" → (["a", "b", "c"], value)

    value는 TOML 리터럴로 해석하고 (숫자, 불리언, 배열, 따옴표 문자열) 실패하면 문자열 그대로 쓴다.
    """
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    parts = key.split(".")
    if any(not part for part in parts):
        raise ConfigError(f"invalid override key: {key!r}")
    raw = raw.strip()
    try:
        value = tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw
    return parts, value


def apply_overrides(tree: dict[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    """오버라이드를 병합한 새 트리"""
    merged = copy.deepcopy(tree)
    for text in overrides:
        parts, value = parse_override(text)
        node = merged
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {text!r}: {part!r} is not a table")
            node = child
        node[parts[-1]] = value
    return merged


def build_config(tree: dict[str, Any]) -> ExperimentConfig:
    """
    트리 검증

    Raises:
        ConfigError: 스키마 위반 (pydantic 검증 메시지 포함)
    """
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {e}") from e


def load_experiment(
    config: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    epochs: Optional[int] = None,
) -> ExperimentConfig:
    """
    설정 파일(또는 프리셋) + 오버라이드 → ExperimentConfig

    Args:
        config: 경로 또는 프리셋 이름 (없으면 기본값)
        overrides: "key=value" 목록
        seed: 실험 seed 오버라이드
        epochs: epoch 수 오버라이드
    """
    tree: dict[str, Any] = {}
    source = "defaults"
    if config is not None:
        path = resolve_config_path(config)
        tree = read_config_tree(path)
        source = str(path)

    extra = list(overrides)
    if seed is not None:
        extra.append(f"seed={int(seed)}")
    if epochs is not None:
        extra.append(f"epochs={int(epochs)}")

    experiment = build_config(apply_overrides(tree, extra))
    logger.info("Experiment config loaded", source=source, variant=experiment.variant, overrides=len(extra))
    return experiment
