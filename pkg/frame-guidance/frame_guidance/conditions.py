"""
フレーム条件

ガイド対象フレームの集合とそのターゲットを束ね、部分デコードされたフレームから損失を評価する。
デコード前に潜在を空間縮小する場合は、ターゲットも同じ率で縮小して比較する。
"""

import logging
from abc import ABC, abstractmethod
from difflib import get_close_matches
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Mapping, Optional, Sequence, Tuple, Type

import torch

from .base_backend import ConfigError, ShapeError
from .dataset import color_block_edit
from .encoders import FeatureEncoder, StyleProxy, make_encoder
from .losses import composite_loss, encoded_l2, keyframe_l2, loop_loss, masked_l2, style_loss
from .slicing import SlicedFrames, frame_to_latent, spatial_downsample
from .video_io import read_image, read_mask, read_video

logger = logging.getLogger(__name__)

DEFAULT_STYLE_FRAMES = 4


def evenly_spaced(num_frames: int, count: int) -> List[int]:
    """0 .. F−1 から count 個を等間隔に選ぶ"""
    if count <= 1:
        return [0]
    count = min(count, num_frames)
    return sorted({round(k * (num_frames - 1) / (count - 1)) for k in range(count)})


def downsample_frames(frames: torch.Tensor, factor: int) -> torch.Tensor:
    """(n, H, W, C) の平均プーリング"""
    return spatial_downsample(frames, factor)


class FrameCondition(ABC):
    """
    フレーム条件の基底クラス

    Attributes:
        frames: ガイド対象フレームインデックス 𝓘
        weight: 非負の重み
    """

    kind: ClassVar[str] = ""

    def __init__(self, frames: Sequence[int], weight: float = 1.0):
        self.frames = [int(i) for i in frames]
        self.weight = float(weight)
        if self.weight < 0:
            raise ConfigError(f"条件の重みは非負である必要があります: {self.weight}")
        self._cache: Dict[Tuple[Any, ...], torch.Tensor] = {}

    def guided_frames(self) -> List[int]:
        return list(self.frames)

    def latent_indices(self, r: int) -> List[int]:
        """𝓙 = {frame_to_latent(i) | i ∈ 𝓘}"""
        return sorted({frame_to_latent(i, r) for i in self.guided_frames()})

    def validate(self, num_frames: int) -> None:
        """ガイド対象フレームが範囲内であることを確認"""
        if not self.guided_frames():
            raise ConfigError(f"{self.kind} 条件にはガイド対象フレームが必要です")
        bad = [i for i in self.guided_frames() if not 0 <= i < num_frames]
        if bad:
            raise ConfigError(f"{self.kind} 条件のフレームインデックスが範囲外です: {bad} (F={num_frames})")

    def _downsampled(self, key: str, tensor: torch.Tensor, factor: int, dtype: torch.dtype) -> torch.Tensor:
        cache_key = (key, factor, dtype)
        if cache_key not in self._cache:
            self._cache[cache_key] = downsample_frames(tensor.to(dtype), factor)
        return self._cache[cache_key]

    @abstractmethod
    def loss(self, decoded: SlicedFrames, factor: int = 1) -> torch.Tensor:
        """
        部分デコード済みフレームから損失を評価

        Args:
            decoded: slice_decode の結果
            factor: デコード前に適用した空間縮小率

        Returns:
            微分可能なスカラー
        """
        pass

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "frames": self.guided_frames(), "weight": self.weight}


def _check_targets(frames: Sequence[int], targets: torch.Tensor) -> torch.Tensor:
    if targets.dim() == 3:
        targets = targets.unsqueeze(0).expand(len(frames), -1, -1, -1)
    if targets.dim() != 4 or targets.shape[0] != len(frames):
        raise ShapeError(f"ターゲットは (|𝓘|, H, W, C) である必要があります: {tuple(targets.shape)}")
    return targets


class KeyframeCondition(FrameCondition):
    """指定フレームをターゲット画像に近づける L2 条件"""

    kind: ClassVar[str] = "keyframe"

    def __init__(self, frames: Sequence[int], targets: torch.Tensor, weight: float = 1.0):
        super().__init__(frames, weight)
        self.targets = _check_targets(self.frames, targets)

    def loss(self, decoded: SlicedFrames, factor: int = 1) -> torch.Tensor:
        x = decoded.select(self.frames)
        return keyframe_l2(x, self._downsampled("targets", self.targets, factor, x.dtype))


class StyleCondition(FrameCondition):
    """指定フレームのスタイル記述子をスタイル画像に揃える条件"""

    kind: ClassVar[str] = "style"

    def __init__(
        self,
        frames: Sequence[int],
        style_image: torch.Tensor,
        encoder: Optional[FeatureEncoder] = None,
        weight: float = 1.0,
    ):
        super().__init__(frames, weight)
        if style_image.dim() != 3:
            raise ShapeError(f"スタイル画像は (H, W, C) である必要があります: {tuple(style_image.shape)}")
        self.style_image = style_image
        self.encoder = encoder if encoder is not None else make_encoder("style_proxy")
        if not isinstance(self.encoder, StyleProxy):
            raise ConfigError("style 条件には style_proxy エンコーダーが必要です")

    def loss(self, decoded: SlicedFrames, factor: int = 1) -> torch.Tensor:
        x = decoded.select(self.frames)
        style = self._downsampled("style", self.style_image.unsqueeze(0), factor, x.dtype)
        return style_loss(x, style, self.encoder)


class LoopCondition(FrameCondition):
    """先頭フレームと末尾フレームを一致させる条件 (先頭側は勾配停止)"""

    kind: ClassVar[str] = "loop"

    def __init__(self, num_frames: int, weight: float = 1.0):
        if num_frames < 2:
            raise ConfigError(f"loop 条件には 2 フレーム以上が必要です: {num_frames}")
        super().__init__([0, num_frames - 1], weight)

    def loss(self, decoded: SlicedFrames, factor: int = 1) -> torch.Tensor:
        x = decoded.select(self.frames)
        return loop_loss(x[0], x[1])


class EncodedCondition(FrameCondition):
    """深度・エッジなどのプロキシ符号化空間での L2 条件"""

    kind: ClassVar[str] = "encoded"

    def __init__(
        self,
        frames: Sequence[int],
        targets: torch.Tensor,
        encoder: FeatureEncoder,
        weight: float = 1.0,
    ):
        super().__init__(frames, weight)
        if isinstance(encoder, StyleProxy):
            raise ConfigError("encoded 条件には edge_proxy または depth_proxy が必要です")
        self.targets = _check_targets(self.frames, targets)
        self.encoder = encoder

    def encoded_targets(self, factor: int, dtype: torch.dtype) -> torch.Tensor:
        key = ("encoded", factor, dtype)
        if key not in self._cache:
            with torch.no_grad():
                self._cache[key] = self.encoder(downsample_frames(self.targets.to(dtype), factor))
        return self._cache[key]

    def loss(self, decoded: SlicedFrames, factor: int = 1) -> torch.Tensor:
        x = decoded.select(self.frames)
        return encoded_l2(x, self.encoded_targets(factor, x.dtype), self.encoder)


class MaskedCondition(FrameCondition):
    """二値マスク内の領域だけをターゲットに近づける条件"""

    kind: ClassVar[str] = "masked"

    def __init__(self, frames: Sequence[int], targets: torch.Tensor, mask: torch.Tensor, weight: float = 1.0):
        super().__init__(frames, weight)
        self.targets = _check_targets(self.frames, targets)
        if mask.dim() == 2:
            mask = mask.unsqueeze(-1)
        if mask.dim() == 3:
            mask = mask.unsqueeze(0)
        if mask.shape[1:3] != self.targets.shape[1:3]:
            raise ShapeError(f"マスクの空間形状がフレームと一致しません: {tuple(mask.shape)}")
        if not torch.all((mask == 0) | (mask == 1)):
            raise ShapeError("マスクは {0, 1} の値である必要があります")
        self.mask = mask

    def mask_at(self, factor: int, dtype: torch.dtype) -> torch.Tensor:
        key = ("mask", factor, dtype)
        if key not in self._cache:
            # 縮小後のマスクは 0.5 で再び二値化する
            pooled = downsample_frames(self.mask.to(dtype), factor)
            self._cache[key] = (pooled >= 0.5).to(dtype)
        return self._cache[key]

    def loss(self, decoded: SlicedFrames, factor: int = 1) -> torch.Tensor:
        x = decoded.select(self.frames)
        target = self._downsampled("targets", self.targets, factor, x.dtype)
        return masked_l2(x, target, self.mask_at(factor, x.dtype))


class CompositeCondition(FrameCondition):
    """子条件の重み付き和"""

    kind: ClassVar[str] = "composite"

    def __init__(self, children: Sequence[Tuple[FrameCondition, float]], weight: float = 1.0):
        if not children:
            raise ConfigError("composite 条件には 1 つ以上の子条件が必要です")
        self.children = [(child, float(w)) for child, w in children]
        frames = sorted({i for child, _ in self.children for i in child.guided_frames()})
        super().__init__(frames, weight)

    def validate(self, num_frames: int) -> None:
        for child, _ in self.children:
            child.validate(num_frames)

    def loss(self, decoded: SlicedFrames, factor: int = 1) -> torch.Tensor:
        return composite_loss([(child.loss(decoded, factor), w) for child, w in self.children])

    def describe(self) -> Dict[str, Any]:
        info = super().describe()
        info["children"] = [dict(child.describe(), weight=w) for child, w in self.children]
        return info


CONDITIONS: Dict[str, Type[FrameCondition]] = {}


def register_condition(name: str, condition_class: Type[FrameCondition]) -> None:
    """条件クラスを登録"""
    norm = name.strip().lower()
    if not norm:
        raise ValueError("condition name は空にできません")
    if not isinstance(condition_class, type) or not issubclass(condition_class, FrameCondition):
        raise TypeError("condition_class は FrameCondition のサブクラスである必要があります")
    if norm in CONDITIONS:
        logger.warning("condition '%s' を上書き登録します", norm)
    CONDITIONS[norm] = condition_class


for _cls in (KeyframeCondition, StyleCondition, LoopCondition, EncodedCondition, MaskedCondition, CompositeCondition):
    register_condition(_cls.kind, _cls)


def get_condition_class(name: str) -> Type[FrameCondition]:
    condition_class = CONDITIONS.get(name.strip().lower())
    if condition_class is None:
        suggest = get_close_matches(name, list(CONDITIONS), n=3, cutoff=0.6)
        hint = f" (候補: {', '.join(suggest)})" if suggest else ""
        raise ConfigError(f"未知の条件: {name}{hint}")
    return condition_class


def load_asset(spec: Mapping[str, Any], base_dir: Path, channels: int = 3) -> torch.Tensor:
    """
    アセット指定から (H, W, C) の画像を読み込む

    指定形式:
        {"image": パス}
        {"video": コンテナディレクトリ, "frame": インデックス}
    いずれも "color_block": {"box": [top, left, bottom, right], "color": [...]} で編集可能。
    """
    if "image" in spec:
        image = read_image(Path(base_dir) / spec["image"], channels=channels)
    elif "video" in spec:
        video, _ = read_video(Path(base_dir) / spec["video"])
        index = int(spec.get("frame", 0))
        if not 0 <= index < video.shape[0]:
            raise ConfigError(f"アセットのフレームが範囲外です: {index} (F={video.shape[0]})")
        image = video[index]
        if image.shape[-1] != channels:
            image = image.mean(dim=-1, keepdim=True) if channels == 1 else image.expand(-1, -1, 3)
    else:
        raise ConfigError(f"アセット指定には image または video が必要です: {dict(spec)}")

    block = spec.get("color_block")
    if block:
        image = color_block_edit(image, block["box"], block["color"])
    return image


def build_condition(
    entry: Mapping[str, Any],
    num_frames: int,
    base_dir: Path,
    channels: int = 3,
    seed: int = 0,
) -> FrameCondition:
    """
    設定エントリから条件を構築

    Args:
        entry: conditions の 1 要素
        num_frames: 生成するフレーム数 F
        base_dir: 相対パスの基準ディレクトリ
        channels: 画素チャンネル数
        seed: プロキシエンコーダーのシード

    Returns:
        検証済みの FrameCondition
    """
    kind = str(entry.get("kind", "")).strip().lower()
    condition_class = get_condition_class(kind)
    weight = float(entry.get("weight", 1.0))
    frames = entry.get("frames")
    if frames == "auto" or (frames is None and kind == "style"):
        frames = evenly_spaced(num_frames, int(entry.get("num_guided", DEFAULT_STYLE_FRAMES)))

    def targets_for(guided: Sequence[int]) -> torch.Tensor:
        specs = entry.get("targets") or [entry.get("target")] * len(guided)
        if len(specs) != len(guided) or any(s is None for s in specs):
            raise ConfigError(f"{kind} 条件のターゲット数がフレーム数と一致しません")
        return torch.stack([load_asset(s, base_dir, channels) for s in specs])

    if condition_class is LoopCondition:
        condition: FrameCondition = LoopCondition(num_frames, weight)
    elif condition_class is CompositeCondition:
        children = [
            (build_condition(child, num_frames, base_dir, channels, seed), float(child.get("weight", 1.0)))
            for child in entry.get("children", [])
        ]
        condition = CompositeCondition(children, weight)
    elif condition_class is KeyframeCondition:
        condition = KeyframeCondition(frames or [], targets_for(frames or []), weight)
    elif condition_class is StyleCondition:
        if "style" not in entry:
            raise ConfigError("style 条件には style アセットが必要です")
        style = load_asset(entry["style"], base_dir, channels)
        condition = StyleCondition(frames, style, make_encoder("style_proxy", seed), weight)
    elif condition_class is EncodedCondition:
        encoder = make_encoder(str(entry.get("encoder", "depth_proxy")), seed)
        condition = EncodedCondition(frames or [], targets_for(frames or []), encoder, weight)
    elif condition_class is MaskedCondition:
        if "mask" not in entry:
            raise ConfigError("masked 条件には mask アセットが必要です")
        mask = read_mask(Path(base_dir) / entry["mask"]["image"])
        condition = MaskedCondition(frames or [], targets_for(frames or []), mask, weight)
    else:
        raise ConfigError(f"設定から構築できない条件です: {kind}")

    condition.validate(num_frames)
    return condition
