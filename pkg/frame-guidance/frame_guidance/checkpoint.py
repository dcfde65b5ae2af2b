"""
チェックポイントの保存と読み込み

<name>.json にアーキテクチャ・シード・学習状況とレイヤー一覧を、
<name>.bin にレイヤー一覧の順でリトルエンディアン float32 のパラメータを書き出す。
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from .base_backend import CheckpointError
from .models import build_model

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
BLOB_DTYPE = "<f4"


def _paths(path: Union[str, Path]) -> Tuple[Path, Path]:
    base = Path(path)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    return base.with_name(base.name + ".json"), base.with_name(base.name + ".bin")


def save_checkpoint(
    model: nn.Module,
    path: Union[str, Path],
    extra: Optional[Mapping[str, Any]] = None,
) -> Path:
    """
    モデルをチェックポイントとして保存

    Args:
        model: architecture() と kind を持つモデル
        path: 拡張子なしの保存先 (拡張子付きでも可)
        extra: マニフェストに追加する情報 (学習予算、完了エポック数など)

    Returns:
        マニフェストのパス

    Raises:
        CheckpointError: 書き込みに失敗した場合
    """
    manifest_path, blob_path = _paths(path)
    layers = []
    chunks = []
    offset = 0
    for name, tensor in model.state_dict().items():
        array = tensor.detach().cpu().to(torch.float32).numpy().astype(BLOB_DTYPE).reshape(-1)
        layers.append({"name": name, "shape": list(tensor.shape), "offset": offset, "count": int(array.size)})
        chunks.append(array)
        offset += int(array.size)

    manifest: Dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "architecture": model.architecture(),
        "dtype": "float32",
        "byte_order": "little",
        "layers": layers,
        "blob": blob_path.name,
    }
    if extra:
        manifest.update(dict(extra))

    try:
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype=BLOB_DTYPE)
        blob_path.write_bytes(blob.tobytes())
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise CheckpointError(f"チェックポイントを書き込めません: {manifest_path}: {e}") from e

    logger.info("チェックポイントを保存しました: %s (%d パラメータ)", manifest_path, offset)
    return manifest_path


def load_checkpoint(path: Union[str, Path]) -> Tuple[nn.Module, Dict[str, Any]]:
    """
    チェックポイントからモデルを復元

    Args:
        path: マニフェスト (.json) またはその拡張子なしのパス

    Returns:
        (モデル, マニフェスト)

    Raises:
        CheckpointError: ファイルが無い、または内容が不整合な場合
    """
    manifest_path, _ = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise CheckpointError(f"チェックポイントが見つかりません: {manifest_path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"マニフェストを読み込めません: {manifest_path}: {e}") from e

    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"未対応のチェックポイント形式です: {manifest.get('format_version')}")

    blob_path = manifest_path.with_name(manifest["blob"])
    try:
        blob = np.frombuffer(blob_path.read_bytes(), dtype=BLOB_DTYPE)
    except OSError as e:
        raise CheckpointError(f"パラメータファイルを読み込めません: {blob_path}: {e}") from e

    model = build_model(manifest["kind"], manifest["architecture"])
    expected = model.state_dict()
    state = {}
    for layer in manifest["layers"]:
        name = layer["name"]
        if name not in expected:
            raise CheckpointError(f"未知のレイヤーです: {name}")
        start, count = int(layer["offset"]), int(layer["count"])
        if start + count > blob.size:
            raise CheckpointError(f"パラメータファイルが短すぎます: {blob_path}")
        values = torch.from_numpy(blob[start:start + count].astype(np.float32))
        state[name] = values.reshape(layer["shape"])
    missing = set(expected) - set(state)
    if missing:
        raise CheckpointError(f"レイヤーが不足しています: {', '.join(sorted(missing))}")

    model.load_state_dict(state)
    logger.info("チェックポイントを読み込みました: %s", manifest_path)
    return model, manifest


def checkpoint_exists(path: Union[str, Path]) -> bool:
    """マニフェストとパラメータファイルが両方あるか"""
    manifest_path, blob_path = _paths(path)
    return manifest_path.exists() and blob_path.exists()
