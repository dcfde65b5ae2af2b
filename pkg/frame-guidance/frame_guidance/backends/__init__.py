"""
サンプラーバックエンドモジュール

潜在の予測・デノイズ・タイムトラベル更新を提供するバックエンド群:
- diffusion (v パラメータ化 + DDIM)
- flow (フローマッチング + Euler)
"""

from __future__ import annotations

import logging
from typing import Type

from ..base_backend import SamplerBackend

logger = logging.getLogger(__name__)

# バックエンド登録レジストリ
BACKENDS: dict[str, Type[SamplerBackend]] = {}


def register_backend(name: str, backend_class: Type[SamplerBackend]) -> None:
    """
    バックエンドを登録

    Args:
        name: バックエンド名
        backend_class: バックエンドクラス
    """
    norm = name.strip().lower()
    if not norm:
        raise ValueError("backend name は空にできません")
    if not isinstance(backend_class, type) or not issubclass(backend_class, SamplerBackend):
        raise TypeError("backend_class は SamplerBackend のサブクラスである必要があります")
    if norm in BACKENDS:
        logger.warning("backend '%s' (正規化名: '%s') を上書き登録します", name, norm)
    BACKENDS[norm] = backend_class


def get_available_backends() -> list[str]:
    """
    利用可能なバックエンド一覧を取得

    Returns:
        バックエンド名のリスト
    """
    return sorted(BACKENDS.keys())


def get_backend_class(name: str) -> Type[SamplerBackend] | None:
    """名前でバックエンドのクラスを取得(見つからない場合はNone)。"""
    return BACKENDS.get(name.strip().lower())


def _auto_register_backends():
    """組み込みバックエンドを自動登録"""
    from .diffusion_backend import DiffusionBackend
    from .flow_backend import FlowBackend

    register_backend(DiffusionBackend.name, DiffusionBackend)
    register_backend(FlowBackend.name, FlowBackend)
    logger.debug("バックエンドを登録しました: %s", get_available_backends())


_auto_register_backends()

__all__ = ["BACKENDS", "get_available_backends", "get_backend_class", "register_backend"]
