"""
因果的時空間オートエンコーダー

最初のフレームを単独で、以降を r フレームずつのグループで 1 潜在に圧縮する。
デコーダーは潜在 j のフレームブロックを潜在 j-R+1 .. j だけから復元するため、
時間方向の因果性と有限な受容野が構造的に保証される。
"""

import logging
import math
from typing import Any, ClassVar, Dict, Optional

import torch
from einops import rearrange
from torch import nn

from ..base_backend import ShapeError

logger = logging.getLogger(__name__)


def latent_count(frames: int, rate: int) -> int:
    """L = 1 + ⌈(F−1)/r⌉"""
    if frames < 1:
        raise ShapeError(f"フレーム数は 1 以上である必要があります: {frames}")
    return 1 + -(-(frames - 1) // rate)


def frames_for_latents(latents: int, rate: int) -> int:
    """L 個の潜在が表す最大フレーム数 1 + r(L−1)"""
    return 1 + rate * (latents - 1)


def _halvings(factor: int) -> int:
    steps = int(round(math.log2(factor))) if factor >= 1 else -1
    if steps < 0 or 2 ** steps != factor:
        raise ShapeError(f"空間圧縮率は 2 のべき乗である必要があります: {factor}")
    return steps


class CausalVAE(nn.Module):
    """
    グループ単位エンコーダーと因果ブロックデコーダーからなる決定的オートエンコーダー

    Attributes:
        channels: 画素チャンネル数 C
        latent_channels: 潜在チャンネル数 c
        temporal_rate: 時間圧縮率 r
        spatial_factor: 空間圧縮率 s
        receptive_field: デコーダーの時間受容野 R (潜在単位)
    """

    kind: ClassVar[str] = "causal_vae"

    def __init__(
        self,
        channels: int = 3,
        latent_channels: int = 4,
        temporal_rate: int = 4,
        spatial_factor: int = 4,
        receptive_field: int = 3,
        hidden: int = 32,
        seed: int = 0,
    ):
        super().__init__()
        if channels not in (1, 3):
            raise ShapeError(f"チャンネル数は 1 または 3 である必要があります: {channels}")
        if temporal_rate < 1 or receptive_field < 1:
            raise ShapeError("temporal_rate と receptive_field は 1 以上である必要があります")
        self.channels = channels
        self.latent_channels = latent_channels
        self.temporal_rate = temporal_rate
        self.spatial_factor = spatial_factor
        self.receptive_field = receptive_field
        self.hidden = hidden
        self.seed = seed

        halvings = _halvings(spatial_factor)
        generator_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            encoder = [nn.Conv2d(temporal_rate * channels, hidden, 3, padding=1), nn.SiLU()]
            for _ in range(halvings):
                encoder += [nn.Conv2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU()]
            encoder.append(nn.Conv2d(hidden, latent_channels, 1))
            self.encoder = nn.Sequential(*encoder)

            decoder = [nn.Conv2d(receptive_field * latent_channels, hidden, 3, padding=1), nn.SiLU()]
            for _ in range(halvings):
                decoder += [
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(hidden, hidden, 3, padding=1),
                    nn.SiLU(),
                ]
            decoder.append(nn.Conv2d(hidden, temporal_rate * channels, 3, padding=1))
            self.decoder = nn.Sequential(*decoder)
        finally:
            torch.random.set_rng_state(generator_state)

        self.register_buffer("latent_scale", torch.ones(()))

    def architecture(self) -> Dict[str, Any]:
        """チェックポイントのマニフェストに記録するハイパーパラメータ"""
        return {
            "channels": self.channels,
            "latent_channels": self.latent_channels,
            "temporal_rate": self.temporal_rate,
            "spatial_factor": self.spatial_factor,
            "receptive_field": self.receptive_field,
            "hidden": self.hidden,
            "seed": self.seed,
        }

    def num_latents(self, frames: int) -> int:
        return latent_count(frames, self.temporal_rate)

    def _check_video(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[-1] != self.channels:
            raise ShapeError(f"ビデオは (F, H, W, {self.channels}) である必要があります: {tuple(x.shape)}")
        if x.shape[1] % self.spatial_factor or x.shape[2] % self.spatial_factor:
            raise ShapeError(f"フレームサイズが空間圧縮率 {self.spatial_factor} で割り切れません: {tuple(x.shape)}")

    def _check_latent(self, z: torch.Tensor) -> None:
        if z.dim() != 4 or z.shape[-1] != self.latent_channels:
            raise ShapeError(f"潜在は (L, h, w, {self.latent_channels}) である必要があります: {tuple(z.shape)}")

    def _frame_groups(self, x: torch.Tensor) -> torch.Tensor:
        """(F, H, W, C) → (L, r, H, W, C)。先頭フレームは前方を、末尾グループは後方をゼロ埋め"""
        r = self.temporal_rate
        frames = x.shape[0]
        L = self.num_latents(frames)
        pad_front = x.new_zeros((r - 1,) + tuple(x.shape[1:]))
        pad_back = x.new_zeros((frames_for_latents(L, r) - frames,) + tuple(x.shape[1:]))
        padded = torch.cat([pad_front, x, pad_back], dim=0)
        return rearrange(padded, "(l r) h w c -> l r h w c", r=r)

    def encode_group(self, group: torch.Tensor) -> torch.Tensor:
        """r フレームのグループ (r, H, W, C) を 1 潜在 (h, w, c) に符号化"""
        inp = rearrange(group, "r h w c -> 1 (r c) h w")
        out = self.encoder(inp) / self.latent_scale
        return rearrange(out, "1 c h w -> h w c")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """
        ビデオを潜在に符号化

        Args:
            x: VideoTensor (F, H, W, C)

        Returns:
            LatentTensor (L, h, w, c)
        """
        self._check_video(x)
        groups = self._frame_groups(x)
        return torch.stack([self.encode_group(g) for g in groups])

    def decode_block(self, z: torch.Tensor, j: int, start: int = 0) -> torch.Tensor:
        """
        潜在 j のフレームブロックを復元

        文脈は潜在 max(start, j−R+1) .. j で、それより前はゼロで埋める。

        Args:
            z: LatentTensor (L, h, w, c)
            j: 対象の潜在インデックス
            start: 参照可能な最初の潜在インデックス(スライス窓の開始位置)

        Returns:
            j = 0 なら (1, H, W, C)、それ以外は (r, H, W, C)
        """
        self._check_latent(z)
        if not 0 <= start <= j < z.shape[0]:
            raise ShapeError(f"潜在インデックスが不正です: j={j}, start={start}, L={z.shape[0]}")
        context = []
        for k in range(j - self.receptive_field + 1, j + 1):
            context.append(z[k] if k >= start else torch.zeros_like(z[j]))
        inp = rearrange(torch.stack(context) * self.latent_scale, "k h w c -> 1 (k c) h w")
        out = torch.sigmoid(self.decoder(inp))
        frames = rearrange(out, "1 (r c) h w -> r h w c", r=self.temporal_rate)
        return frames[-1:] if j == 0 else frames

    def decode(self, z: torch.Tensor, num_frames: Optional[int] = None) -> torch.Tensor:
        """
        潜在全体をビデオに復号

        Args:
            z: LatentTensor (L, h, w, c)
            num_frames: 出力フレーム数 (省略時は 1 + r(L−1))

        Returns:
            VideoTensor (F, H, W, C)
        """
        self._check_latent(z)
        L = z.shape[0]
        frames = torch.cat([self.decode_block(z, j, 0) for j in range(L)], dim=0)
        if num_frames is not None:
            if latent_count(num_frames, self.temporal_rate) != L:
                raise ShapeError(f"フレーム数 {num_frames} は潜在数 {L} と一致しません")
            frames = frames[:num_frames]
        return frames

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """
        バッチ単位の再構成 (学習用)

        Args:
            x: (B, F, H, W, C)

        Returns:
            再構成 (B, F, H, W, C)
        """
        batch, frames = x.shape[0], x.shape[1]
        groups = torch.stack([self._frame_groups(clip) for clip in x])
        L = groups.shape[1]
        latents = self.encoder(rearrange(groups, "b l r h w c -> (b l) (r c) h w"))
        latents = rearrange(latents, "(b l) c h w -> b l c h w", b=batch)

        pad = latents.new_zeros((batch, self.receptive_field - 1) + tuple(latents.shape[2:]))
        padded = torch.cat([pad, latents], dim=1)
        contexts = torch.stack(
            [padded[:, j:j + self.receptive_field] for j in range(L)], dim=1
        )
        out = torch.sigmoid(self.decoder(rearrange(contexts, "b l k c h w -> (b l) (k c) h w")))
        out = rearrange(out, "(b l) (r c) h w -> b (l r) h w c", b=batch, r=self.temporal_rate)
        # 潜在 0 のブロックは最後のフレームのみ使う
        return out[:, self.temporal_rate - 1:self.temporal_rate - 1 + frames]
