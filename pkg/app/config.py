"""환경변수 설정 - Pydantic Settings"""
from functools import lru_cache

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """애플리케이션 설정

    실험 설정(ExperimentConfig)과 달리 프로세스 단위 설정만 담는다.
    """

    model_config = SettingsConfigDict(
        env_file=(".env.local",),
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Logging
    log_level: str = "info"

    # Output
    output_dir: str = "runs"

    # Evaluation (pair 단위 병렬 평가 스레드 수)
    eval_workers: int = 1

    # Training (다음 배치 증강을 학습과 겹쳐서 준비)
    prefetch_batches: bool = True

    # Checkpoint
    checkpoint_format: str = "gaussian-attention-checkpoint"
    checkpoint_version: int = 1


@lru_cache
def get_settings() -> Settings:
    """캐시된 설정 인스턴스 반환"""
    return Settings()
