"""
エラーハンドリング

全コンポーネントの例外を分類し、終了コードとユーザー向けメッセージを決める。
終了コード: 0 成功, 1 設定・入力エラー, 2 数値エラー, 3 入出力エラー, 130 中断。
"""

import logging
import sys
import traceback
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

from .base_backend import (
    CheckpointError,
    ConfigError,
    DegenerateInputError,
    NumericalError,
    ScheduleError,
    ShapeError,
    VideoFormatError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USER = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3
EXIT_INTERRUPTED = 130


class ErrorCategory(Enum):
    """エラーカテゴリ"""
    CONFIGURATION = "configuration"
    INPUT = "input"
    NUMERICAL = "numerical"
    IO = "io"
    SYSTEM = "system"


class ErrorSeverity(Enum):
    """エラー重要度"""
    CRITICAL = "critical"  # システム停止
    HIGH = "high"         # 機能停止
    MEDIUM = "medium"     # 機能制限
    LOW = "low"           # 警告


@dataclass
class ErrorInfo:
    """エラー情報の構造化"""
    category: ErrorCategory
    severity: ErrorSeverity
    message: str
    user_message: str
    suggestions: List[str] = field(default_factory=list)
    exit_code: int = EXIT_USER
    technical_details: Optional[str] = None


class ErrorHandler:
    """
    エラーハンドリングクラス

    例外を ErrorInfo に分類し、標準エラー出力に表示する。
    """

    def __init__(self, verbose: bool = False):
        """
        Args:
            verbose: トレースバックを表示するかどうか
        """
        self.verbose = verbose

    def handle_error(self, error: BaseException, context: Optional[str] = None) -> ErrorInfo:
        """
        例外を処理して ErrorInfo を生成

        Args:
            error: 処理する例外
            context: 発生したコマンドなど

        Returns:
            構造化されたエラー情報
        """
        logger.error("エラーを処理中: %s - %s", type(error).__name__, error)
        if context:
            logger.error("コンテキスト: %s", context)

        error_info = self._classify_error(error)
        if self.verbose:
            error_info.technical_details = "".join(traceback.TracebackException.from_exception(error).format())
        self._log_error(error_info)
        return error_info

    def _classify_error(self, error: BaseException) -> ErrorInfo:
        message = str(error)
        if isinstance(error, ConfigError):
            return ErrorInfo(
                category=ErrorCategory.CONFIGURATION,
                severity=ErrorSeverity.HIGH,
                message=f"設定エラー: {message}",
                user_message=f"設定に問題があります: {message}",
                suggestions=[
                    "設定ファイルのキーと値を確認してください",
                    "docs/configuration.md のスキーマと比較してください",
                ],
                exit_code=EXIT_USER,
            )
        if isinstance(error, (ShapeError, ScheduleError, DegenerateInputError)):
            return ErrorInfo(
                category=ErrorCategory.INPUT,
                severity=ErrorSeverity.HIGH,
                message=f"入力エラー: {message}",
                user_message=f"入力が不正です: {message}",
                suggestions=["フレーム番号・画像サイズ・ステップ番号を確認してください"],
                exit_code=EXIT_USER,
            )
        if isinstance(error, NumericalError):
            return ErrorInfo(
                category=ErrorCategory.NUMERICAL,
                severity=ErrorSeverity.CRITICAL,
                message=f"数値エラー: {message}",
                user_message=f"計算が発散しました: {message}",
                suggestions=[
                    "学習率や eta を小さくしてください",
                    "出力ディレクトリのトレース / メトリクスを確認してください",
                ],
                exit_code=EXIT_NUMERICAL,
            )
        if isinstance(error, (CheckpointError, VideoFormatError, OSError)):
            return ErrorInfo(
                category=ErrorCategory.IO,
                severity=ErrorSeverity.HIGH,
                message=f"入出力エラー: {message}",
                user_message=f"ファイルの読み書きに失敗しました: {message}",
                suggestions=[
                    "パスと権限を確認してください",
                    "チェックポイントやデータセットを作り直してください",
                ],
                exit_code=EXIT_IO,
            )
        if isinstance(error, ValueError):
            return ErrorInfo(
                category=ErrorCategory.INPUT,
                severity=ErrorSeverity.MEDIUM,
                message=f"値エラー: {message}",
                user_message=f"入力値が不正です: {message}",
                exit_code=EXIT_USER,
            )
        return ErrorInfo(
            category=ErrorCategory.SYSTEM,
            severity=ErrorSeverity.CRITICAL,
            message=f"予期しないエラー: {type(error).__name__}: {message}",
            user_message=f"予期しないエラーが発生しました: {message}",
            suggestions=["--verbose で詳細を確認してください"],
            exit_code=EXIT_USER,
        )

    def display_error(self, error_info: ErrorInfo) -> None:
        """エラーを標準エラー出力に表示"""
        severity_emoji = {
            ErrorSeverity.CRITICAL: "🚨",
            ErrorSeverity.HIGH: "❌",
            ErrorSeverity.MEDIUM: "⚠️",
            ErrorSeverity.LOW: "ℹ️",
        }
        emoji = severity_emoji.get(error_info.severity, "❌")
        print(f"{emoji} {error_info.user_message}", file=sys.stderr)
        if error_info.suggestions:
            print("\n💡 解決方法:", file=sys.stderr)
            for i, suggestion in enumerate(error_info.suggestions, 1):
                print(f"  {i}. {suggestion}", file=sys.stderr)
        if error_info.technical_details:
            print(f"\n{error_info.technical_details}", file=sys.stderr)

    def _log_error(self, error_info: ErrorInfo) -> None:
        log_level = {
            ErrorSeverity.CRITICAL: logging.CRITICAL,
            ErrorSeverity.HIGH: logging.ERROR,
            ErrorSeverity.MEDIUM: logging.WARNING,
            ErrorSeverity.LOW: logging.INFO,
        }
        logger.log(log_level.get(error_info.severity, logging.ERROR), "[%s] %s", error_info.category.value, error_info.message)
        if error_info.technical_details:
            logger.debug("技術的詳細: %s", error_info.technical_details)

    def get_exit_code(self, error: BaseException) -> int:
        """例外に対応する終了コード"""
        return self._classify_error(error).exit_code
