"""
微分可能なプロキシ特徴エンコーダー

事前学習済みのスタイル記述子・深度推定器・線画予測器の代わりに使う小さなネットワーク:
- style_proxy: チャンネル統計と方向エネルギーのランダム射影 (64 次元)
- edge_proxy: 平滑化した輝度勾配の大きさ
- depth_proxy: 輝度のぼかしピラミッド
"""

import logging
import math
from difflib import get_close_matches
from typing import ClassVar, Dict, Type

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .base_backend import ConfigError, ShapeError

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
STYLE_DIM = 64
ORIENTATION_BINS = 8


def luminance(frames: torch.Tensor) -> torch.Tensor:
    """(N, H, W, C) → (N, H, W)"""
    if frames.dim() != 4 or frames.shape[-1] not in (1, 3):
        raise ShapeError(f"フレームは (N, H, W, C) かつ C ∈ {{1, 3}} である必要があります: {tuple(frames.shape)}")
    if frames.shape[-1] == 1:
        return frames[..., 0]
    weights = torch.tensor(LUMA_WEIGHTS, dtype=frames.dtype, device=frames.device)
    return (frames * weights).sum(dim=-1)


def _blur(image: torch.Tensor) -> torch.Tensor:
    """[1, 2, 1]/4 の分離可能ぼかし (端は複製パディング)"""
    padded = F.pad(image.unsqueeze(1), (1, 1, 1, 1), mode="replicate").squeeze(1)
    rows = (padded[:, :, :-2] + 2.0 * padded[:, :, 1:-1] + padded[:, :, 2:]) / 4.0
    return (rows[:, :-2, :] + 2.0 * rows[:, 1:-1, :] + rows[:, 2:, :]) / 4.0


def _gradients(image: torch.Tensor):
    """中心差分 (dx, dy)"""
    padded = F.pad(image.unsqueeze(1), (1, 1, 1, 1), mode="replicate").squeeze(1)
    dx = (padded[:, 1:-1, 2:] - padded[:, 1:-1, :-2]) / 2.0
    dy = (padded[:, 2:, 1:-1] - padded[:, :-2, 1:-1]) / 2.0
    return dx, dy


class FeatureEncoder(nn.Module):
    """プロキシエンコーダーの基底クラス"""

    kind: ClassVar[str] = ""
    per_pixel: ClassVar[bool] = True

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed


class StyleProxy(FeatureEncoder):
    """
    スタイル記述子のプロキシ

    チャンネル平均・分散・共分散と 8 方向の勾配エネルギーを固定のランダム 2 層ネットワークで
    64 次元に射影する。色調と筆致の向きには反応するが、意味的な内容は捉えない。
    """

    kind: ClassVar[str] = "style_proxy"
    per_pixel: ClassVar[bool] = False

    def __init__(self, seed: int = 0, dim: int = STYLE_DIM):
        super().__init__(seed)
        in_features = 3 + 3 + 6 + ORIENTATION_BINS
        generator = torch.Generator().manual_seed(seed)
        self.register_buffer("w1", torch.randn(dim, in_features, generator=generator) / math.sqrt(in_features))
        self.register_buffer("b1", 0.1 * torch.randn(dim, generator=generator))
        self.register_buffer("w2", torch.randn(dim, dim, generator=generator) / math.sqrt(dim))
        angles = torch.arange(ORIENTATION_BINS, dtype=torch.float64) * (2.0 * math.pi / ORIENTATION_BINS)
        self.register_buffer("directions", torch.stack([torch.cos(angles), torch.sin(angles)], dim=-1))

    def statistics(self, frames: torch.Tensor) -> torch.Tensor:
        """(N, H, W, C) → (N, 20) の統計量"""
        if frames.shape[-1] == 1:
            frames = frames.expand(-1, -1, -1, 3)
        pixels = rearrange(frames, "n h w c -> n (h w) c")
        means = pixels.mean(dim=1)
        centred = pixels - means.unsqueeze(1)
        cov = torch.einsum("npc,npd->ncd", centred, centred) / pixels.shape[1]
        rows, cols = torch.triu_indices(3, 3)
        variances = torch.diagonal(cov, dim1=1, dim2=2)

        dx, dy = _gradients(luminance(frames))
        directions = self.directions.to(frames.dtype)
        projected = dx.unsqueeze(-1) * directions[:, 0] + dy.unsqueeze(-1) * directions[:, 1]
        energies = torch.relu(projected).pow(2).mean(dim=(1, 2))
        return torch.cat([means - 0.5, variances * 4.0, cov[:, rows, cols] * 4.0, energies * 16.0], dim=-1)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        feats = self.statistics(frames)
        hidden = torch.tanh(feats @ self.w1.to(feats.dtype).T + self.b1.to(feats.dtype))
        return hidden @ self.w2.to(feats.dtype).T


class EdgeProxy(FeatureEncoder):
    """線画予測器のプロキシ: 平滑化輝度の勾配の大きさ (一定画像では厳密に 0)"""

    kind: ClassVar[str] = "edge_proxy"

    def __init__(self, seed: int = 0, eps: float = 1e-3):
        super().__init__(seed)
        self.eps_sq = eps * eps

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        dx, dy = _gradients(_blur(luminance(frames)))
        floor = torch.full_like(dx, self.eps_sq)
        magnitude = torch.sqrt(dx * dx + dy * dy + floor) - torch.sqrt(floor)
        return magnitude.unsqueeze(-1)


class DepthProxy(FeatureEncoder):
    """深度推定器のプロキシ: 輝度を複数スケールでぼかした平均"""

    kind: ClassVar[str] = "depth_proxy"

    def __init__(self, seed: int = 0, scales: tuple = (1, 2, 4)):
        super().__init__(seed)
        self.scales = tuple(scales)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        luma = luminance(frames).unsqueeze(1)
        levels = []
        for scale in self.scales:
            if scale == 1:
                levels.append(_blur(luma[:, 0]).unsqueeze(1))
            elif luma.shape[-1] % scale == 0 and luma.shape[-2] % scale == 0:
                pooled = F.avg_pool2d(luma, scale)
                levels.append(pooled.repeat_interleave(scale, dim=-2).repeat_interleave(scale, dim=-1))
        return torch.stack(levels).mean(dim=0).squeeze(1).unsqueeze(-1)


ENCODERS: Dict[str, Type[FeatureEncoder]] = {
    StyleProxy.kind: StyleProxy,
    EdgeProxy.kind: EdgeProxy,
    DepthProxy.kind: DepthProxy,
}


def make_encoder(kind: str, seed: int = 0) -> FeatureEncoder:
    """
    プロキシエンコーダーを作成

    Raises:
        ConfigError: 未知の種類
    """
    encoder_class = ENCODERS.get(kind)
    if encoder_class is None:
        suggest = get_close_matches(kind, list(ENCODERS), n=3, cutoff=0.6)
        hint = f" (候補: {', '.join(suggest)})" if suggest else ""
        raise ConfigError(f"未知のエンコーダー: {kind}{hint}")
    encoder = encoder_class(seed=seed)
    encoder.eval()
    return encoder
