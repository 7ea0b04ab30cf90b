"""학습 loss

- 양방향 대응 loss: l_xy = ‖X̂ - Y[π]‖², l_yx = ‖Ŷ - X[π⁻¹]‖²
- SEP loss: SEP 출력과 목표 벡터의 평균 제곱 오차
reduction "mean"은 점 개수로 나누고 "sum"은 그대로 합한다.
"""
from typing import Literal, Sequence

import numpy as np

from app.core.errors import DimensionError
from app.core.geometry import Correspondence, PointCloud
from app.core.models import LossBreakdown
from app.core.tensor import Tensor, add, mean_all, mul, scale, sub, sum_all

Reduction = Literal["mean", "sum"]


def _squared_error(pred: Tensor, target: np.ndarray, reduction: Reduction) -> Tensor:
    diff = sub(pred, Tensor(target))
    total = sum_all(mul(diff, diff))
    if reduction == "mean":
        return scale(total, 1.0 / target.shape[0])
    return total


def correspondence_loss(
    x_hat: Tensor,
    y_hat: Tensor,
    x: PointCloud,
    y: PointCloud,
    corr: Correspondence,
    reduction: Reduction = "mean",
) -> tuple[Tensor, Tensor]:
    """
    양방향 대응 loss

    X̂ i번 행의 목표는 Y의 π(i)번 점, Ŷ j번 행의 목표는 X의 π⁻¹(j)번 점이다.

    Returns:
        (l_xy, l_yx) 스칼라 텐서

    Raises:
        DimensionError: 크기 불일치
    """
    n = len(corr)
    if x_hat.shape != (n, 3) or y_hat.shape != (n, 3) or len(x) != n or len(y) != n:
        raise DimensionError(
            f"loss shape mismatch: x_hat {x_hat.shape}, y_hat {y_hat.shape}, |X|={len(x)}, |Y|={len(y)}, |π|={n}"
        )
    l_xy = _squared_error(x_hat, y.points[corr.pairs], reduction)
    l_yx = _squared_error(y_hat, x.points[corr.inverse().pairs], reduction)
    return l_xy, l_yx


def sep_loss(sep_out: Tensor, sep_target: Sequence[float] = (0.0, 0.0, 0.0)) -> Tensor:
    """SEP 출력 평균 제곱 오차 (3개 좌표 평균)"""
    target = np.asarray(sep_target, dtype=np.float64).reshape(sep_out.shape)
    diff = sub(sep_out, Tensor(target))
    return mean_all(mul(diff, diff))


def total_loss(
    x_hat: Tensor,
    y_hat: Tensor,
    sep_out: Tensor,
    x: PointCloud,
    y: PointCloud,
    corr: Correspondence,
    sep_target: Sequence[float] = (0.0, 0.0, 0.0),
    sep_weight: float = 1.0,
    reduction: Reduction = "mean",
) -> tuple[Tensor, LossBreakdown]:
    """l_xy + l_yx + sep_weight·l_sep 와 구성요소"""
    l_xy, l_yx = correspondence_loss(x_hat, y_hat, x, y, corr, reduction)
    l_sep = sep_loss(sep_out, sep_target)
    total = add(add(l_xy, l_yx), scale(l_sep, sep_weight))
    breakdown = LossBreakdown(
        l_xy=l_xy.item(),
        l_yx=l_yx.item(),
        l_sep=l_sep.item(),
        total=total.item(),
    )
    return total, breakdown
