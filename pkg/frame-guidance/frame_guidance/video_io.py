"""
ビデオコンテナの入出力

コンテナはフレームごとのバイナリ PPM (P6) ファイル frame_%04d.ppm と、
{frames, height, width, channels, fps, seed, provenance} だけを持つ manifest.json からなる。
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch
from PIL import Image

from .base_backend import ShapeError, VideoFormatError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
FRAME_PATTERN = "frame_{:04d}.ppm"
MANIFEST_KEYS = frozenset({"frames", "height", "width", "channels", "fps", "seed", "provenance"})
DEFAULT_FPS = 8


def to_uint8(frame: torch.Tensor) -> np.ndarray:
    """[0, 1] のフレームを 8bit 配列に量子化"""
    array = frame.detach().cpu().to(torch.float64).clamp(0.0, 1.0).numpy()
    return np.rint(array * 255.0).astype(np.uint8)


def write_video(
    directory: Union[str, Path],
    video: torch.Tensor,
    fps: int = DEFAULT_FPS,
    seed: Optional[int] = None,
    provenance: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    VideoTensor をコンテナとして書き出す

    Args:
        directory: 出力ディレクトリ (存在しなければ作成)
        video: (F, H, W, C)、C は 1 または 3
        fps: フレームレート
        seed: 生成に使ったシード
        provenance: 生成元の情報

    Returns:
        manifest.json のパス
    """
    if video.dim() != 4 or video.shape[-1] not in (1, 3):
        raise ShapeError(f"ビデオは (F, H, W, C) かつ C ∈ {{1, 3}} である必要があります: {tuple(video.shape)}")
    if not torch.isfinite(video).all():
        raise VideoFormatError("非有限値を含むビデオは書き出せません")

    out_dir = Path(directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames, height, width, channels = (int(d) for d in video.shape)
    for index in range(frames):
        pixels = to_uint8(video[index])
        if channels == 1:
            pixels = np.repeat(pixels, 3, axis=-1)
        Image.fromarray(pixels).save(out_dir / FRAME_PATTERN.format(index), format="PPM")

    manifest = {
        "frames": frames,
        "height": height,
        "width": width,
        "channels": channels,
        "fps": int(fps),
        "seed": seed,
        "provenance": provenance or {},
    }
    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.debug("ビデオを書き出しました: %s (%d フレーム)", out_dir, frames)
    return manifest_path


def read_manifest(directory: Union[str, Path]) -> Dict[str, Any]:
    """manifest.json を読み込み、キー集合を検証"""
    manifest_path = Path(directory) / MANIFEST_NAME
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise VideoFormatError(f"マニフェストが見つかりません: {manifest_path}") from e
    except json.JSONDecodeError as e:
        raise VideoFormatError(f"マニフェストが JSON として不正です: {manifest_path}: {e}") from e
    if not isinstance(manifest, dict) or set(manifest) != MANIFEST_KEYS:
        found = sorted(manifest) if isinstance(manifest, dict) else type(manifest).__name__
        raise VideoFormatError(f"マニフェストのキーが不正です: {found}")
    if manifest["channels"] not in (1, 3):
        raise VideoFormatError(f"チャンネル数が不正です: {manifest['channels']}")
    return manifest


def read_video(directory: Union[str, Path]) -> Tuple[torch.Tensor, Dict[str, Any]]:
    """
    コンテナを読み込む

    Returns:
        (VideoTensor (F, H, W, C)、マニフェスト)

    Raises:
        VideoFormatError: フレーム数・サイズ・形式がマニフェストと一致しない場合
    """
    in_dir = Path(directory)
    manifest = read_manifest(in_dir)
    frames = []
    for index in range(manifest["frames"]):
        frame_path = in_dir / FRAME_PATTERN.format(index)
        if not frame_path.exists():
            raise VideoFormatError(f"フレームが不足しています: {frame_path}")
        with Image.open(frame_path) as image:
            if image.format != "PPM" or image.mode != "RGB":
                raise VideoFormatError(f"P6 形式の PPM ではありません: {frame_path}")
            if image.size != (manifest["width"], manifest["height"]):
                raise VideoFormatError(
                    f"フレームサイズがマニフェストと一致しません: {frame_path} {image.size}"
                )
            pixels = np.asarray(image, dtype=np.uint8)
        frames.append(pixels[..., :1] if manifest["channels"] == 1 else pixels)

    extra = in_dir / FRAME_PATTERN.format(manifest["frames"])
    if extra.exists():
        raise VideoFormatError(f"マニフェストより多くのフレームがあります: {extra}")

    video = torch.from_numpy(np.stack(frames).astype(np.float32) / 255.0)
    return video, manifest


def read_image(path: Union[str, Path], channels: int = 3) -> torch.Tensor:
    """画像ファイル (PPM / PNG など) を (H, W, C) の [0, 1] テンソルとして読み込む"""
    try:
        with Image.open(path) as image:
            converted = image.convert("RGB" if channels == 3 else "L")
            pixels = np.asarray(converted, dtype=np.float32) / 255.0
    except OSError as e:
        raise VideoFormatError(f"画像を読み込めません: {path}: {e}") from e
    if channels == 1:
        pixels = pixels[..., None]
    return torch.from_numpy(pixels)


def read_mask(path: Union[str, Path]) -> torch.Tensor:
    """単一チャンネル画像を 0.5 で二値化したマスク (H, W, 1)"""
    return (read_image(path, channels=1) >= 0.5).to(torch.float32)


def write_png(path: Union[str, Path], image: np.ndarray) -> Path:
    """8bit のグレースケール (H, W) または RGB (H, W, 3) 配列を PNG で保存"""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(out, format="PNG")
    return out
