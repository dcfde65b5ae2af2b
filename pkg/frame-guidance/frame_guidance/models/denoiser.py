"""
速度予測デノイザー

潜在ごとの空間エンコーダー → 潜在インデックス方向の大域的自己注意 → 潜在ごとの空間デコーダー。
注意は全ての潜在位置を混合するため、出力のどの潜在も入力の全潜在に依存する。
"""

import logging
import math
from typing import Any, ClassVar, Dict, Union

import torch
from einops import rearrange
from torch import nn

from ..base_backend import ShapeError

logger = logging.getLogger(__name__)


def sinusoidal_embedding(values: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """スカラー列 (N,) を (N, dim) の正弦波埋め込みに変換"""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=values.dtype, device=values.device) / half
    )
    args = values.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class VelocityDenoiser(nn.Module):
    """
    v_θ(z_t, t) を予測するネットワーク

    Attributes:
        latent_channels: 潜在チャンネル数 c
        hidden: 特徴次元
        heads: 注意ヘッド数
        backend: 学習対象のバックエンド名 ("diffusion" / "flow")
        max_steps: ステップ埋め込みの正規化に使う T
    """

    kind: ClassVar[str] = "denoiser"

    def __init__(
        self,
        latent_channels: int = 4,
        hidden: int = 48,
        heads: int = 4,
        embed_dim: int = 32,
        backend: str = "diffusion",
        max_steps: int = 50,
        seed: int = 0,
    ):
        super().__init__()
        if hidden % heads:
            raise ShapeError(f"hidden ({hidden}) は heads ({heads}) で割り切れる必要があります")
        self.latent_channels = latent_channels
        self.hidden = hidden
        self.heads = heads
        self.embed_dim = embed_dim
        self.backend = backend
        self.max_steps = max_steps
        self.seed = seed

        generator_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.spatial_in = nn.Sequential(
                nn.Conv2d(latent_channels, hidden, 3, padding=1),
                nn.SiLU(),
                nn.Conv2d(hidden, hidden, 3, padding=1),
            )
            self.step_mlp = nn.Sequential(nn.Linear(embed_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
            self.norm = nn.LayerNorm(hidden)
            self.attention = nn.MultiheadAttention(hidden, heads, batch_first=True)
            self.spatial_out = nn.Sequential(
                nn.SiLU(),
                nn.Conv2d(hidden, hidden, 3, padding=1),
                nn.SiLU(),
                nn.Conv2d(hidden, latent_channels, 3, padding=1),
            )
        finally:
            torch.random.set_rng_state(generator_state)

    def architecture(self) -> Dict[str, Any]:
        return {
            "latent_channels": self.latent_channels,
            "hidden": self.hidden,
            "heads": self.heads,
            "embed_dim": self.embed_dim,
            "backend": self.backend,
            "max_steps": self.max_steps,
            "seed": self.seed,
        }

    def forward(self, z: torch.Tensor, t: Union[int, torch.Tensor]) -> torch.Tensor:
        """
        速度を予測

        Args:
            z: (L, h, w, c) または (B, L, h, w, c)
            t: ステップ (整数、またはバッチごとの (B,) テンソル)

        Returns:
            z と同じ形状の速度
        """
        single = z.dim() == 4
        if single:
            z = z.unsqueeze(0)
        if z.dim() != 5 or z.shape[-1] != self.latent_channels:
            raise ShapeError(f"潜在は (B, L, h, w, {self.latent_channels}) である必要があります: {tuple(z.shape)}")
        batch, L, h, w, _ = z.shape

        steps = torch.as_tensor(t, dtype=z.dtype, device=z.device).reshape(-1).expand(batch)
        step_emb = self.step_mlp(sinusoidal_embedding(steps * (1000.0 / self.max_steps), self.embed_dim))

        feat = self.spatial_in(rearrange(z, "b l h w c -> (b l) c h w"))
        feat = rearrange(feat, "(b l) d h w -> b l h w d", b=batch)
        positions = sinusoidal_embedding(torch.arange(L, dtype=z.dtype, device=z.device), self.hidden)
        feat = feat + step_emb[:, None, None, None, :] + positions[None, :, None, None, :]

        seq = rearrange(feat, "b l h w d -> (b h w) l d")
        normed = self.norm(seq)
        mixed, _ = self.attention(normed, normed, normed, need_weights=False)
        seq = seq + mixed

        feat = rearrange(seq, "(b h w) l d -> (b l) d h w", b=batch, h=h, w=w)
        out = rearrange(self.spatial_out(feat), "(b l) c h w -> b l h w c", b=batch)
        return out[0] if single else out
