"""
トイビデオモデル

因果的 VAE と速度予測デノイザー、およびそれらを束ねる ModelBundle。
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Type

import torch
from torch import nn

from ..base_backend import CheckpointError, SamplerBackend
from .causal_vae import CausalVAE, frames_for_latents, latent_count
from .denoiser import VelocityDenoiser

logger = logging.getLogger(__name__)

MODEL_CLASSES: Dict[str, Type[nn.Module]] = {
    CausalVAE.kind: CausalVAE,
    VelocityDenoiser.kind: VelocityDenoiser,
}


def build_model(kind: str, architecture: Mapping[str, Any]) -> nn.Module:
    """種類名とハイパーパラメータからモデルを構築"""
    model_class = MODEL_CLASSES.get(kind)
    if model_class is None:
        raise CheckpointError(f"未知のモデル種類: {kind} (選択肢: {', '.join(sorted(MODEL_CLASSES))})")
    return model_class(**dict(architecture))


@dataclass
class ModelBundle:
    """
    ガイダンスに必要なモデル一式

    Attributes:
        vae: エンコーダー / デコーダー
        denoiser: 速度予測器 v_θ
        backend: サンプラーバックエンド
    """
    vae: CausalVAE
    denoiser: VelocityDenoiser
    backend: SamplerBackend

    def velocity(self, z: torch.Tensor, t: int) -> torch.Tensor:
        return self.denoiser(z, t)

    def freeze(self) -> "ModelBundle":
        """推論用にパラメータの勾配を無効化"""
        for model in (self.vae, self.denoiser):
            model.eval()
            for param in model.parameters():
                param.requires_grad_(False)
        return self

    @property
    def dtype(self) -> torch.dtype:
        return self.vae.latent_scale.dtype


__all__ = [
    "CausalVAE",
    "MODEL_CLASSES",
    "ModelBundle",
    "VelocityDenoiser",
    "build_model",
    "frames_for_latents",
    "latent_count",
]
