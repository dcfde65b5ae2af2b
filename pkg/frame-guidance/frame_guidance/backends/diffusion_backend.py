"""
拡散バックエンド

v パラメータ化された速度予測から Tweedie 推定を行い、決定的 DDIM でサンプリングする。
ディテールステージの更新は再ノイズ付きのタイムトラベル。
"""

import logging
from typing import TYPE_CHECKING, ClassVar

import torch

from ..base_backend import SamplerBackend
from ..schedules import ddim_step, forward_noise, tweedie_clean, velocity_target
from ..vlo import time_travel

if TYPE_CHECKING:
    from ..vlo import GuidanceConfig

logger = logging.getLogger(__name__)


class DiffusionBackend(SamplerBackend):
    """コサインスケジュール上の v 予測拡散サンプラー"""

    name: ClassVar[str] = "diffusion"
    schedule_kind: ClassVar[str] = "diffusion"

    def predict_clean(self, z_t: torch.Tensor, v: torch.Tensor, t: int) -> torch.Tensor:
        return tweedie_clean(z_t, v, t, self.schedule)

    def denoise_step(self, z_t: torch.Tensor, v: torch.Tensor, t: int) -> torch.Tensor:
        z0_pred = self.predict_clean(z_t, v, t)
        return ddim_step(z_t, z0_pred, t, self.schedule)

    def time_travel(
        self,
        z_t: torch.Tensor,
        z0_pred: torch.Tensor,
        grad: torch.Tensor,
        t: int,
        cfg: "GuidanceConfig",
        seed: int,
    ) -> torch.Tensor:
        return time_travel(z_t, z0_pred, grad, t, self.schedule, cfg, seed)

    def noise(self, z0: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
        return forward_noise(z0, t, eps, self.schedule)

    def training_target(self, z0: torch.Tensor, eps: torch.Tensor, t: int) -> torch.Tensor:
        return velocity_target(z0, eps, t, self.schedule)
