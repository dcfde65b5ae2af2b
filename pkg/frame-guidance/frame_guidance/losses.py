"""
ガイダンス損失ライブラリ

全ての損失はデコード後の画素空間フレームを受け取り、微分可能なスカラーテンソルを返す。
"""

import logging
from typing import Sequence, Tuple

import torch

from .base_backend import ConfigError, DegenerateInputError, ShapeError
from .encoders import FeatureEncoder, StyleProxy
from .schedules import check_same_shape

logger = logging.getLogger(__name__)


def keyframe_l2(x_pred: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Σ_i ‖x_*^i − x^i‖²"""
    check_same_shape(x_pred, targets, "予測フレームとターゲット")
    return torch.sum((targets - x_pred) ** 2)


def style_loss(x_pred: torch.Tensor, x_style: torch.Tensor, encoder: FeatureEncoder) -> torch.Tensor:
    """
    −Σ_i cos(Ψ(x_style), Ψ(x^i))

    Args:
        x_pred: (n, H, W, C) のガイド対象フレーム
        x_style: (H, W, C) または (1, H, W, C) のスタイル画像
        encoder: style_proxy

    Raises:
        ConfigError: エンコーダーが style_proxy でない場合
        DegenerateInputError: 記述子のノルムが 0 の場合
    """
    if not isinstance(encoder, StyleProxy):
        raise ConfigError(f"style_loss には style_proxy が必要です (指定: {encoder.kind})")
    if x_style.dim() == 3:
        x_style = x_style.unsqueeze(0)
    if x_style.shape[1:] != x_pred.shape[1:]:
        raise ShapeError(f"スタイル画像の形状がフレームと一致しません: {tuple(x_style.shape)} と {tuple(x_pred.shape)}")

    pred = encoder(x_pred)
    style = encoder(x_style)
    pred_norm = torch.linalg.vector_norm(pred, dim=-1)
    style_norm = torch.linalg.vector_norm(style, dim=-1)
    if (pred_norm == 0).any() or (style_norm == 0).any():
        raise DegenerateInputError("スタイル記述子のノルムが 0 です")
    cosine = (pred * style).sum(dim=-1) / (pred_norm * style_norm)
    return -cosine.sum()


def loop_loss(x_first: torch.Tensor, x_last: torch.Tensor) -> torch.Tensor:
    """‖sg(x_first) − x_last‖²。先頭フレーム側には勾配が流れない"""
    check_same_shape(x_first, x_last, "先頭フレームと末尾フレーム")
    return torch.sum((x_first.detach() - x_last) ** 2)


def encoded_l2(x_pred: torch.Tensor, encoded_targets: torch.Tensor, encoder: FeatureEncoder) -> torch.Tensor:
    """Σ_i ‖Ψ(x_*^i) − Ψ(x^i)‖² (ターゲットは符号化済み)"""
    if isinstance(encoder, StyleProxy):
        raise ConfigError("encoded_l2 には edge_proxy または depth_proxy が必要です")
    encoded = encoder(x_pred)
    check_same_shape(encoded, encoded_targets, "符号化フレームと符号化ターゲット")
    return torch.sum((encoded_targets - encoded) ** 2)


def masked_l2(x_pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """
    Σ ‖mask ⊙ (x_* − x)‖²

    Raises:
        ShapeError: 形状が合わない、またはマスクが二値でない場合
    """
    check_same_shape(x_pred, target, "予測フレームとターゲット")
    try:
        torch.broadcast_shapes(mask.shape, x_pred.shape)
    except RuntimeError as e:
        raise ShapeError(f"マスクの形状 {tuple(mask.shape)} はフレーム {tuple(x_pred.shape)} に適用できません") from e
    if not torch.all((mask == 0) | (mask == 1)):
        raise ShapeError("マスクは {0, 1} の値である必要があります")
    if not mask.any():
        logger.warning("マスクが全て 0 のためこの条件はガイダンスに寄与しません")
    return torch.sum((mask * (target - x_pred)) ** 2)


def composite_loss(children: Sequence[Tuple[torch.Tensor, float]]) -> torch.Tensor:
    """
    子損失の重み付き和

    Args:
        children: (損失, 重み) の列

    Raises:
        ConfigError: 空の場合
    """
    if not children:
        raise ConfigError("composite 条件には 1 つ以上の子条件が必要です")
    total = None
    for loss, weight in children:
        term = weight * loss
        total = term if total is None else total + term
    return total
