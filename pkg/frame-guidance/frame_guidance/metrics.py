"""
ビデオ評価指標

ガイド対象フレームの誤差、時間的一貫性、飽和度、低周波距離。
"""

from typing import Sequence

import torch
from einops import reduce

from .base_backend import ShapeError
from .schedules import check_same_shape

SATURATION_TOL = 1.0 / 255.0
LOW_FREQUENCY_POOL = 4


def frame_errors(video: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """全フレームについて 1 枚のターゲット (H, W, C) への MSE を返す (F,)"""
    if video.shape[1:] != target.shape:
        raise ShapeError(f"ターゲットの形状がフレームと一致しません: {tuple(target.shape)}")
    return torch.mean((video - target) ** 2, dim=(1, 2, 3))


def guided_frame_l2(video: torch.Tensor, frames: Sequence[int], targets: torch.Tensor) -> float:
    """ガイド対象フレームとターゲットのフレームあたり平均二乗誤差"""
    selected = video[list(frames)]
    check_same_shape(selected, targets, "ガイド対象フレームとターゲット")
    return torch.mean((selected - targets) ** 2).item()


def adjacent_differences(video: torch.Tensor) -> torch.Tensor:
    """隣接フレーム間の MSE (F−1,)"""
    if video.shape[0] < 2:
        return video.new_zeros(0)
    return torch.mean((video[1:] - video[:-1]) ** 2, dim=(1, 2, 3))


def temporal_coherence(video: torch.Tensor) -> float:
    """隣接フレーム間 MSE の平均 (大きいほど時間的に不連続)"""
    diffs = adjacent_differences(video)
    return diffs.mean().item() if diffs.numel() else 0.0


def saturation_score(video: torch.Tensor, tol: float = SATURATION_TOL) -> float:
    """値域の端から tol 以内にある画素値の割合"""
    saturated = (video <= tol) | (video >= 1.0 - tol)
    return saturated.to(torch.float64).mean().item()


def low_pass(video: torch.Tensor, pool: int = LOW_FREQUENCY_POOL) -> torch.Tensor:
    """空間平均プーリングによる低周波成分"""
    if video.shape[1] % pool or video.shape[2] % pool:
        raise ShapeError(f"フレームサイズ {tuple(video.shape[1:3])} はプール率 {pool} で割り切れません")
    return reduce(video, "f (h a) (w b) c -> f h w c", "mean", a=pool, b=pool)


def low_frequency_distance(a: torch.Tensor, b: torch.Tensor, pool: int = LOW_FREQUENCY_POOL) -> float:
    """低周波成分同士の平均二乗距離"""
    check_same_shape(a, b, "比較するビデオ")
    return torch.mean((low_pass(a, pool) - low_pass(b, pool)) ** 2).item()
