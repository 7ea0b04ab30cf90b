"""학습 루프

epoch마다: 배치 구성(증강) → couple별 forward/loss/backward (gradient 누적) → Adam step.
- epoch 평균 loss가 가장 낮을 때 best.ckpt, 매 epoch last.ckpt
- loss가 NaN/Inf가 되면 diverged.ckpt를 남기고 중단
- 끝나면 train_log.json 과 loss_curve.csv (원본 + 이동평균)
"""
import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from app.core.encoder import EncoderModel
from app.core.errors import ContractError, TrainingDivergedError
from app.core.losses import total_loss
from app.core.models import EpochRecord, ExperimentConfig, LossBreakdown, OptimizerConfig, TrainLog
from app.core.optim import Adam, clip_grad_norm
from app.core.tensor import backward, scale
from app.services.checkpoint import save_checkpoint
from app.services.dataset import ShapeDataset, TrainBatch, iterate_batches
from app.utils.files import atomic_write, atomic_write_text, ensure_dir, format_float
from app.utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

LAST_CHECKPOINT = "last.ckpt"
BEST_CHECKPOINT = "best.ckpt"
DIVERGED_CHECKPOINT = "diverged.ckpt"
TRAIN_LOG = "train_log.json"
LOSS_CURVE = "loss_curve.csv"
LOSS_CURVE_COLUMNS = ("epoch", "total", "l_xy", "l_yx", "l_sep", "smoothed")


@dataclass
class TrainResult:
    """학습 결과 (모델은 마지막 epoch 상태)"""
    model: EncoderModel
    log: TrainLog
    output_dir: Path

    @property
    def best_path(self) -> Path:
        return self.output_dir / BEST_CHECKPOINT

    @property
    def last_path(self) -> Path:
        return self.output_dir / LAST_CHECKPOINT


def learning_rate(config: OptimizerConfig, epoch: int, epochs: int) -> float:
    """epoch(0부터)의 학습률 (constant 또는 cosine 감쇠)"""
    if config.schedule == "cosine":
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
    return config.lr


def smoothed_losses(values: Sequence[float], window: int) -> list[float]:
    """
    후행 이동평균 (앞쪽은 가능한 만큼만)

    v0 + mean(v - v0) 형태로 계산해서 상수 구간은 정확히 그 상수가 된다.
    """
    values = np.asarray(values, dtype=np.float64)
    smoothed = []
    for i in range(len(values)):
        chunk = values[max(0, i - window + 1): i + 1]
        smoothed.append(float(chunk[0] + np.mean(chunk - chunk[0])))
    return smoothed


def first_epoch_below(values: Sequence[float], threshold: float) -> Optional[int]:
    """값이 처음으로 threshold 이하가 되는 epoch (1부터), 없으면 None"""
    for index, value in enumerate(values):
        if value <= threshold:
            return index + 1
    return None


def emit_loss_curve(log: TrainLog, path: PathLike, window: int = 10) -> Path:
    """
    loss 곡선 CSV (epoch, 구성요소, 이동평균)

    wall time은 넣지 않아서 같은 seed면 바이트 단위로 같은 파일이 나온다.

    Raises:
        ContractError: 빈 로그
    """
    if not log.records:
        raise ContractError("loss curve needs at least one epoch record")
    smoothed = smoothed_losses([r.total for r in log.records], window)
    with atomic_write(path) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(LOSS_CURVE_COLUMNS)
        for record, value in zip(log.records, smoothed):
            writer.writerow([
                record.epoch,
                format_float(record.total),
                format_float(record.l_xy),
                format_float(record.l_yx),
                format_float(record.l_sep),
                format_float(value),
            ])
    return Path(path)


class Trainer:
    """실험 하나의 학습 루프"""

    def __init__(
        self,
        config: ExperimentConfig,
        dataset: ShapeDataset,
        output_dir: PathLike,
        model: Optional[EncoderModel] = None,
        prefetch: Optional[bool] = None,
    ):
        if len(dataset) < config.batch_shapes:
            raise ContractError(
                f"dataset has {len(dataset)} shapes, fewer than batch_shapes={config.batch_shapes}"
            )
        self.config = config
        self.dataset = dataset
        self.output_dir = ensure_dir(output_dir)
        self.model = model or EncoderModel.initialize(config.model, seed=config.seed)
        self.prefetch = prefetch
        opt = config.optimizer
        self.optimizer = Adam(self.model.parameters(), lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)
        self.log = TrainLog(variant=config.variant)

    # ===== 배치 =====

    def train_step(self, batch: TrainBatch, epoch: int) -> list[LossBreakdown]:
        """
        배치 하나: couple별 backward (loss/couple 수로 누적) 후 Adam 1 step

        Raises:
            TrainingDivergedError: loss 또는 gradient가 유한하지 않음
        """
        cfg = self.config
        self.optimizer.zero_grad()
        breakdowns = []
        weight = 1.0 / len(batch)
        for couple in batch.couples:
            result = self.model.forward(couple.x, couple.y)
            loss, breakdown = total_loss(
                result.x_hat,
                result.y_hat,
                result.sep_out,
                couple.x,
                couple.y,
                couple.corr,
                sep_target=cfg.model.sep_value,
                sep_weight=cfg.loss.sep_weight,
                reduction=cfg.loss.reduction,
            )
            if not math.isfinite(breakdown.total):
                self._diverged(epoch, f"loss is not finite ({breakdown.total})")
            backward(scale(loss, weight))
            breakdowns.append(breakdown)

        params = self.optimizer.params
        if any(p.grad is not None and not np.all(np.isfinite(p.grad)) for p in params.values()):
            self._diverged(epoch, "gradient is not finite")
        if cfg.optimizer.grad_clip is not None:
            clip_grad_norm(params, cfg.optimizer.grad_clip)
        self.optimizer.step()
        return breakdowns

    def _diverged(self, epoch: int, reason: str) -> None:
        snapshot = save_checkpoint(
            self.output_dir / DIVERGED_CHECKPOINT, self.model, self.config, epoch=epoch
        )
        logger.error("Training diverged", epoch=epoch, reason=reason, snapshot=str(snapshot))
        raise TrainingDivergedError(f"training diverged at epoch {epoch}: {reason}", snapshot_path=str(snapshot))

    # ===== epoch =====

    def run_epoch(self, epoch: int) -> EpochRecord:
        """epoch 하나 (epoch는 1부터)"""
        cfg = self.config
        started = time.perf_counter()
        self.optimizer.lr = learning_rate(cfg.optimizer, epoch - 1, cfg.epochs)
        breakdowns: list[LossBreakdown] = []
        for batch in iterate_batches(
            self.dataset, cfg.batch_shapes, cfg.augment, cfg.seed, epoch, prefetch=self.prefetch
        ):
            breakdowns.extend(self.train_step(batch, epoch))

        return EpochRecord(
            epoch=epoch,
            total=float(np.mean([b.total for b in breakdowns])),
            l_xy=float(np.mean([b.l_xy for b in breakdowns])),
            l_yx=float(np.mean([b.l_yx for b in breakdowns])),
            l_sep=float(np.mean([b.l_sep for b in breakdowns])),
            sigmas=self.model.sigma_values(),
            lr=self.optimizer.lr,
            wall_time=time.perf_counter() - started,
        )

    def run(self) -> TrainResult:
        """전체 학습 + 체크포인트/로그 출력"""
        cfg = self.config
        logger.info(
            "Training started",
            variant=cfg.variant,
            epochs=cfg.epochs,
            shapes=len(self.dataset),
            n=self.dataset.n,
            output_dir=str(self.output_dir),
        )
        for epoch in range(1, cfg.epochs + 1):
            record = self.run_epoch(epoch)
            self.log.records.append(record)

            if self.log.best_loss is None or record.total < self.log.best_loss:
                self.log.best_loss = record.total
                self.log.best_epoch = epoch
                save_checkpoint(self.output_dir / BEST_CHECKPOINT, self.model, cfg, epoch=epoch, loss=record.total)
            save_checkpoint(self.output_dir / LAST_CHECKPOINT, self.model, cfg, epoch=epoch, loss=record.total)
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(
                    self.output_dir / f"epoch_{epoch:04d}.ckpt", self.model, cfg, epoch=epoch, loss=record.total
                )

            logger.info(
                "Epoch complete",
                epoch=epoch,
                loss=record.total,
                l_xy=record.l_xy,
                l_yx=record.l_yx,
                l_sep=record.l_sep,
                lr=record.lr,
                sigmas=record.sigmas,
            )

        atomic_write_text(self.output_dir / TRAIN_LOG, self.log.model_dump_json(indent=2) + "\n")
        emit_loss_curve(self.log, self.output_dir / LOSS_CURVE, window=cfg.smoothing_window)
        logger.info("Training finished", best_epoch=self.log.best_epoch, best_loss=self.log.best_loss)
        return TrainResult(model=self.model, log=self.log, output_dir=self.output_dir)


def train(
    config: ExperimentConfig,
    dataset: ShapeDataset,
    output_dir: PathLike,
    prefetch: Optional[bool] = None,
) -> TrainResult:
    """config로 새 모델을 만들어 학습"""
    return Trainer(config, dataset, output_dir, prefetch=prefetch).run()
