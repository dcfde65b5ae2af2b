"""
ベースバックエンドインターフェース

全てのサンプラーバックエンド(拡散 / フローマッチング)が実装すべき共通インターフェースと、
パッケージ全体で共有する例外階層を定義する。
"""

from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, Any, ClassVar, Dict, Optional
import logging

import torch

if TYPE_CHECKING:
    from .schedules import NoiseSchedule
    from .vlo import GuidanceConfig

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


class FrameGuidanceError(Exception):
    """frame_guidance 共通の基底エラー"""
    pass


class ConfigError(FrameGuidanceError, ValueError):
    """設定関連のエラー"""
    pass


class ShapeError(FrameGuidanceError, ValueError):
    """テンソル形状の不整合"""
    pass


class ScheduleError(FrameGuidanceError, ValueError):
    """ノイズスケジュールまたはステップ指定の不正"""
    pass


class DegenerateInputError(FrameGuidanceError, ValueError):
    """退化した入力(ゼロノルム記述子など)"""
    pass


class NumericalError(FrameGuidanceError):
    """
    非有限値の検出や学習の発散

    Attributes:
        payload: 中断時点までのトレースや学習メトリクス
    """

    def __init__(self, message: str, payload: Optional[Any] = None):
        super().__init__(message)
        self.payload = payload


class CheckpointError(FrameGuidanceError):
    """チェックポイントの読み書きエラー"""
    pass


class VideoFormatError(FrameGuidanceError):
    """ビデオコンテナ形式のエラー"""
    pass


class SamplerBackend(ABC):
    """全サンプラーバックエンドの基底クラス"""

    name: ClassVar[str] = ""
    schedule_kind: ClassVar[str] = ""

    def __init__(self, schedule: "NoiseSchedule"):
        """
        バックエンドを初期化

        Args:
            schedule: このバックエンドが使用するノイズスケジュール

        Raises:
            ScheduleError: スケジュールの種類がバックエンドと一致しない場合
        """
        if schedule.kind != self.schedule_kind:
            raise ScheduleError(
                f"{self.name} バックエンドには {self.schedule_kind} スケジュールが必要です"
                f"(受け取った種類: {schedule.kind})"
            )
        self.schedule = schedule

    @property
    def T(self) -> int:
        return self.schedule.T

    @abstractmethod
    def predict_clean(self, z_t: torch.Tensor, v: torch.Tensor, t: int) -> torch.Tensor:
        """
        予測速度からクリーンな潜在 z_{0|t} を推定

        Args:
            z_t: ステップ t のノイズ付き潜在
            v: 速度予測 v_θ(z_t, t)
            t: ステップ

        Returns:
            クリーン潜在の推定値
        """
        pass

    @abstractmethod
    def denoise_step(self, z_t: torch.Tensor, v: torch.Tensor, t: int) -> torch.Tensor:
        """
        1ステップ分のデノイズ (t → t-1)

        Args:
            z_t: ステップ t の潜在
            v: 速度予測
            t: ステップ (t ≥ 1)

        Returns:
            ステップ t-1 の潜在
        """
        pass

    @abstractmethod
    def time_travel(
        self,
        z_t: torch.Tensor,
        z0_pred: torch.Tensor,
        grad: torch.Tensor,
        t: int,
        cfg: "GuidanceConfig",
        seed: int,
    ) -> torch.Tensor:
        """
        ディテールステージの再ノイズ付き更新(タイムトラベル)

        Args:
            z_t: ステップ t の潜在
            z0_pred: ステップ t のクリーン推定
            grad: ガイダンス損失の z_t に関する勾配
            t: ステップ
            cfg: ガイダンス設定 (η と勾配正規化)
            seed: 再ノイズ用の乱数シード

        Returns:
            ノイズレベル t に戻された更新済み潜在
        """
        pass

    @abstractmethod
    def noise(self, z0: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
        """順方向のノイズ付加"""
        pass

    @abstractmethod
    def training_target(self, z0: torch.Tensor, eps: torch.Tensor, t: int) -> torch.Tensor:
        """速度回帰の学習ターゲット"""
        pass

    def describe(self) -> Dict[str, Any]:
        """バックエンドの概要(ログ・マニフェスト用)"""
        return {"backend": self.name, "schedule": self.schedule.kind, "T": self.T}
