"""
合成ビデオデータセット

単色背景の上を図形(正方形 / 円)が壁で反射しながら等速移動するクリップを生成する。
全てのクリップは仕様とシードから決定的に再現できる。
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch

from .base_backend import ConfigError, ShapeError

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("square", "circle")
MIN_FRAMES = 9
MIN_SIZE = 16


@dataclass(frozen=True)
class SyntheticClipSpec:
    """
    合成クリップの仕様

    Attributes:
        shape: "square" または "circle"
        color: 図形の RGB 色 ([0, 1])
        background: 背景の RGB 色 (純粋な黒にはならない)
        position: 最初のフレームでの中心座標 (x, y) [ピクセル]
        velocity: 1フレームあたりの移動量 (vx, vy) [ピクセル]
        size: 正方形の半辺長または円の半径 [ピクセル]
        seed: 仕様を生成したシード
    """
    shape: str
    color: Tuple[float, float, float]
    background: Tuple[float, float, float]
    position: Tuple[float, float]
    velocity: Tuple[float, float]
    size: float
    seed: int


def bounce_position(p0: float, v: float, frame: int, lo: float, hi: float) -> float:
    """
    区間 [lo, hi] 内で壁反射する等速運動の解析解

    Args:
        p0: 初期位置
        v: 速度
        frame: フレーム番号
        lo: 下限
        hi: 上限

    Returns:
        フレーム frame での位置
    """
    span = hi - lo
    if span <= 0:
        return lo
    u = (p0 - lo + v * frame) % (2.0 * span)
    if u > span:
        u = 2.0 * span - u
    return lo + u


def trajectory(spec: SyntheticClipSpec, frames: int, height: int, width: int) -> List[Tuple[float, float]]:
    """図形中心の解析的な軌跡 [(x, y), ...]"""
    points = []
    for f in range(frames):
        x = bounce_position(spec.position[0], spec.velocity[0], f, spec.size, width - spec.size)
        y = bounce_position(spec.position[1], spec.velocity[1], f, spec.size, height - spec.size)
        points.append((x, y))
    return points


def render_clip(spec: SyntheticClipSpec, frames: int, height: int, width: int, channels: int = 3) -> torch.Tensor:
    """
    仕様からクリップを描画

    Returns:
        VideoTensor (F, H, W, C)、値は [0, 1]
    """
    if spec.shape not in SHAPE_KINDS:
        raise ConfigError(f"未知の図形: {spec.shape} (選択肢: {', '.join(SHAPE_KINDS)})")
    if channels not in (1, 3):
        raise ShapeError(f"チャンネル数は 1 または 3 である必要があります: {channels}")

    ys = torch.arange(height, dtype=torch.float64).view(height, 1) + 0.5
    xs = torch.arange(width, dtype=torch.float64).view(1, width) + 0.5
    color = torch.tensor(spec.color, dtype=torch.float64)
    background = torch.tensor(spec.background, dtype=torch.float64)

    clip = []
    for cx, cy in trajectory(spec, frames, height, width):
        if spec.shape == "square":
            mask = ((xs - cx).abs() <= spec.size) & ((ys - cy).abs() <= spec.size)
        else:
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= spec.size ** 2
        frame = torch.where(mask.unsqueeze(-1), color, background)
        clip.append(frame)

    video = torch.stack(clip).to(torch.float32)
    if channels == 1:
        video = video.mean(dim=-1, keepdim=True)
    return video


def make_specs(count: int, height: int, width: int, seed: int) -> List[SyntheticClipSpec]:
    """シードから count 個のクリップ仕様を生成"""
    specs = []
    for child in np.random.SeedSequence(seed).spawn(count):
        rng = np.random.default_rng(child)
        size = float(rng.uniform(0.12, 0.2) * min(height, width))
        specs.append(
            SyntheticClipSpec(
                shape=SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))],
                color=tuple(float(c) for c in rng.uniform(0.55, 1.0, size=3)),
                background=tuple(float(c) for c in rng.uniform(0.05, 0.35, size=3)),
                position=(float(rng.uniform(size, width - size)), float(rng.uniform(size, height - size))),
                velocity=tuple(float(v) for v in rng.uniform(-2.0, 2.0, size=2)),
                size=size,
                seed=int(child.generate_state(1)[0]),
            )
        )
    return specs


def generate_dataset(
    spec_count: int,
    frames: int,
    height: int,
    width: int,
    seed: int,
    channels: int = 3,
) -> List[torch.Tensor]:
    """
    シード固定の移動図形データセットを生成

    Args:
        spec_count: クリップ数
        frames: フレーム数 F (≥ 9)
        height: 高さ H (= W, ≥ 16)
        width: 幅 W
        seed: シード
        channels: チャンネル数 (1 または 3)

    Returns:
        VideoTensor のリスト

    Raises:
        ConfigError: サイズが退化している場合
    """
    if spec_count < 1:
        raise ConfigError(f"クリップ数は 1 以上である必要があります: {spec_count}")
    if frames < MIN_FRAMES:
        raise ConfigError(f"フレーム数は {MIN_FRAMES} 以上である必要があります: {frames}")
    if height != width or height < MIN_SIZE:
        raise ConfigError(f"フレームサイズは H = W ≥ {MIN_SIZE} である必要があります: {height}x{width}")

    specs = make_specs(spec_count, height, width, seed)
    clips = [render_clip(spec, frames, height, width, channels) for spec in specs]
    logger.info("合成データセットを生成しました: %d クリップ (%dx%dx%d, F=%d)", spec_count, height, width, channels, frames)
    return clips


def color_block_edit(
    frame: torch.Tensor,
    box: Sequence[int],
    color: Sequence[float],
) -> torch.Tensor:
    """
    フレームに矩形のカラーブロックを描画した新しいフレームを返す

    Args:
        frame: (H, W, C) のフレーム
        box: (top, left, bottom, right)、bottom / right は含まない
        color: チャンネル数分の色

    Returns:
        編集済みフレーム(入力は変更しない)
    """
    if frame.dim() != 3:
        raise ShapeError(f"フレームは (H, W, C) である必要があります: {tuple(frame.shape)}")
    top, left, bottom, right = (int(v) for v in box)
    height, width, channels = frame.shape
    if not (0 <= top < bottom <= height and 0 <= left < right <= width):
        raise ConfigError(f"カラーブロックがフレーム外です: {tuple(box)} (フレーム {height}x{width})")
    if len(color) != channels:
        raise ShapeError(f"色のチャンネル数がフレームと一致しません: {len(color)} と {channels}")
    edited = frame.clone()
    edited[top:bottom, left:right, :] = torch.tensor(list(color), dtype=frame.dtype)
    return edited
