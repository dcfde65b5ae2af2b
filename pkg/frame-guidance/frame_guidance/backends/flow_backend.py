"""
フローマッチングバックエンド

σ_t = t/T の直線経路上で一定の輸送場を回帰するモデル用。
サンプリングは Euler ステップ、ディテールステージは t→0→t のタイムトラベル。
"""

import logging
from typing import TYPE_CHECKING, ClassVar

import torch

from ..base_backend import SamplerBackend
from ..schedules import euler_flow_step, forward_noise, tweedie_clean_flow, velocity_target
from ..vlo import time_travel_flow

if TYPE_CHECKING:
    from ..vlo import GuidanceConfig

logger = logging.getLogger(__name__)


class FlowBackend(SamplerBackend):
    """フローマッチングの Euler サンプラー"""

    name: ClassVar[str] = "flow"
    schedule_kind: ClassVar[str] = "flow"

    def predict_clean(self, z_t: torch.Tensor, v: torch.Tensor, t: int) -> torch.Tensor:
        return tweedie_clean_flow(z_t, v, t, self.schedule)

    def denoise_step(self, z_t: torch.Tensor, v: torch.Tensor, t: int) -> torch.Tensor:
        return euler_flow_step(z_t, v, t, self.schedule)

    def time_travel(
        self,
        z_t: torch.Tensor,
        z0_pred: torch.Tensor,
        grad: torch.Tensor,
        t: int,
        cfg: "GuidanceConfig",
        seed: int,
    ) -> torch.Tensor:
        # z_t は使わない: クリーン推定から直接レベル t に戻す
        return time_travel_flow(z0_pred, grad, t, self.schedule, cfg, seed)

    def noise(self, z0: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
        return forward_noise(z0, t, eps, self.schedule)

    def training_target(self, z0: torch.Tensor, eps: torch.Tensor, t: int) -> torch.Tensor:
        return velocity_target(z0, eps, t, self.schedule)
