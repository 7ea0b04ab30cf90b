"""체크포인트 저장/로딩

npz 컨테이너 하나에:
- "header": JSON (CheckpointHeader)을 uint8 배열로 저장
- "p:<이름>": 파라미터별 float64 배열 (σ는 고정이든 learnable이든 항상 포함)

쓰기는 임시 파일 → rename으로 원자적이다.
로딩 실패(손상, 포맷/버전 불일치, digest 불일치)는 모두 CheckpointError이며 부분 모델은 반환하지 않는다.
"""
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import ValidationError

from app.config import get_settings
from app.core.encoder import SIGMA_PARAM, EncoderModel
from app.core.errors import CheckpointError, ContractError, DimensionError
from app.core.models import CheckpointHeader, ExperimentConfig
from app.utils.digest import parameter_digest
from app.utils.files import atomic_write
from app.utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

HEADER_KEY = "header"
PARAM_PREFIX = "p:"


@dataclass
class LoadedCheckpoint:
    """로딩 결과"""
    model: EncoderModel
    header: CheckpointHeader

    @property
    def experiment(self) -> Optional[ExperimentConfig]:
        return self.header.experiment


def save_checkpoint(
    path: PathLike,
    model: EncoderModel,
    experiment: Optional[ExperimentConfig] = None,
    epoch: Optional[int] = None,
    loss: Optional[float] = None,
) -> Path:
    """
    체크포인트 저장

    Args:
        path: 저장 경로
        model: 인코더
        experiment: 학습 설정 (평가 시 재사용)
        epoch: 저장 시점 epoch
        loss: 해당 epoch 학습 loss
    """
    settings = get_settings()
    arrays = model.state_arrays()
    header = CheckpointHeader(
        format=settings.checkpoint_format,
        version=settings.checkpoint_version,
        model=model.config,
        experiment=experiment,
        sigmas=[float(s) for s in arrays[SIGMA_PARAM]],
        sigma_learnable=model.config.sigma_learnable,
        epoch=epoch,
        loss=None if loss is None else float(loss),
        parameters={name: list(array.shape) for name, array in arrays.items()},
        digest=parameter_digest(arrays),
    )
    payload = {f"{PARAM_PREFIX}{name}": array for name, array in arrays.items()}
    payload[HEADER_KEY] = np.frombuffer(header.model_dump_json().encode("utf-8"), dtype=np.uint8)

    path = Path(path)
    with atomic_write(path, "wb") as handle:
        np.savez(handle, **payload)
    logger.info("Checkpoint saved", path=str(path), epoch=epoch, loss=loss)
    return path


def read_header(path: PathLike) -> CheckpointHeader:
    """파라미터를 읽지 않고 헤더만 확인"""
    header, _ = _read_archive(Path(path), with_params=False)
    return header


def _read_archive(path: Path, with_params: bool = True) -> tuple[CheckpointHeader, dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as archive:
            raw_header = archive[HEADER_KEY].tobytes()
            arrays = {}
            if with_params:
                arrays = {
                    key[len(PARAM_PREFIX):]: np.array(archive[key], dtype=np.float64)
                    for key in archive.files
                    if key.startswith(PARAM_PREFIX)
                }
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint: {e}") from e

    try:
        header = CheckpointHeader.model_validate(json.loads(raw_header.decode("utf-8")))
    except (UnicodeDecodeError, ValueError, ValidationError) as e:
        raise CheckpointError(f"{path}: invalid checkpoint header: {e}") from e

    settings = get_settings()
    if header.format != settings.checkpoint_format:
        raise CheckpointError(f"{path}: unknown checkpoint format {header.format!r}")
    if header.version != settings.checkpoint_version:
        raise CheckpointError(
            f"{path}: checkpoint version {header.version} is not supported "
            f"(expected {settings.checkpoint_version})"
        )
    return header, arrays


def load_checkpoint(path: PathLike) -> LoadedCheckpoint:
    """
    체크포인트 로딩

    Raises:
        CheckpointError: 파일 손상, 포맷/버전 불일치, digest 불일치, 파라미터 구성 불일치
    """
    path = Path(path)
    header, arrays = _read_archive(path)

    if parameter_digest(arrays) != header.digest:
        raise CheckpointError(f"{path}: parameter digest mismatch (corrupt checkpoint)")

    model = EncoderModel.initialize(header.model, seed=0)
    try:
        model.load_arrays(arrays)
    except (ContractError, DimensionError) as e:
        raise CheckpointError(f"{path}: parameters do not match the stored model config: {e}") from e

    logger.info("Checkpoint loaded", path=str(path), epoch=header.epoch, loss=header.loss)
    return LoadedCheckpoint(model=model, header=header)
