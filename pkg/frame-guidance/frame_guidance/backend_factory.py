"""
バックエンドファクトリーモジュール

設定に基づいてサンプラーバックエンドを作成し、ガイダンスなしの参照サンプラーを提供する。
"""

import logging
from difflib import get_close_matches
from typing import Any, Callable, Dict, Mapping, Optional, Sequence, Union

import torch

from .backends import get_available_backends, get_backend_class
from .base_backend import ConfigError, SamplerBackend
from .schedules import NoiseSchedule, make_schedule, standard_normal

logger = logging.getLogger(__name__)


class BackendFactory:
    """バックエンドファクトリークラス"""

    def create_backend(
        self,
        config: Union[str, Mapping[str, Any]],
        schedule: Optional[NoiseSchedule] = None,
    ) -> SamplerBackend:
        """
        設定に基づいてバックエンドを作成する

        Args:
            config: バックエンド名、または {"backend": 名前, "steps": T} を含む設定辞書
            schedule: 使用するスケジュール (省略時はバックエンドの既定スケジュールを作成)

        Returns:
            作成されたバックエンドインスタンス

        Raises:
            ConfigError: 不正な設定
        """
        if isinstance(config, str):
            name, steps = config.strip(), None
        elif isinstance(config, Mapping):
            name = str(config.get("backend", "")).strip()
            steps = config.get("steps")
        else:
            raise ConfigError("backend 設定が文字列またはマッピングではありません")
        if not name:
            raise ConfigError("backend が設定されていません")

        backend_class = get_backend_class(name)
        if backend_class is None:
            available = get_available_backends()
            suggest = get_close_matches(name.lower(), available, n=3, cutoff=0.6)
            hint = f"\n候補: {', '.join(suggest)}" if suggest else ""
            raise ConfigError(
                f"バックエンド '{name}' が見つかりません。\n"
                f"利用可能なバックエンド: {', '.join(available)}{hint}"
            )

        if schedule is None:
            schedule = make_schedule(backend_class.schedule_kind, int(steps) if steps else 50)
        backend = backend_class(schedule)
        logger.info("バックエンドを作成しました: %s (T=%d)", backend.name, backend.T)
        return backend

    def list_available_backends(self) -> Dict[str, list]:
        """
        利用可能な全バックエンドを取得する

        Returns:
            スケジュール種類とバックエンド名の辞書
        """
        return {"backends": get_available_backends()}


def initial_noise(shape: Sequence[int], seed: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """サンプリング開始時の z_T"""
    return standard_normal(shape, seed, dtype=dtype)


def unguided_step(
    denoiser: torch.nn.Module,
    backend: SamplerBackend,
    z: torch.Tensor,
    t: int,
    on_predict: Optional[Callable[[int, torch.Tensor], None]] = None,
) -> torch.Tensor:
    """
    ガイダンスなしの 1 ステップ (ガイド付きサンプラーと共有)

    Args:
        on_predict: 指定時はステップ t のクリーン推定 z_{0|t} を受け取るコールバック
    """
    with torch.no_grad():
        v = denoiser(z, t)
        if on_predict is not None:
            on_predict(t, backend.predict_clean(z, v, t))
        return backend.denoise_step(z, v, t)


def sample_unguided(
    denoiser: torch.nn.Module,
    backend: SamplerBackend,
    shape: Sequence[int],
    seed: int,
    z_start: Optional[torch.Tensor] = None,
    t_start: Optional[int] = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """
    ガイダンスなしの参照サンプラー

    Args:
        denoiser: 速度予測器
        backend: サンプラーバックエンド
        shape: 潜在の形状 (L, h, w, c)
        seed: 初期ノイズのシード
        z_start: 開始潜在 (省略時はシードから z_T を生成)
        t_start: 開始ステップ (省略時は T)
        dtype: 初期ノイズの dtype

    Returns:
        z_0
    """
    t_start = backend.T if t_start is None else t_start
    z = initial_noise(shape, seed, dtype) if z_start is None else z_start
    for t in range(t_start, 0, -1):
        z = unguided_step(denoiser, backend, z, t)
    return z
