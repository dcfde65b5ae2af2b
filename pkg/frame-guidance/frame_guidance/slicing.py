"""
潜在スライシング

フレーム→潜在インデックスの対応、因果窓だけを使う部分デコード、デコード前の空間ダウンサンプリング、
エンコーダーの時間的局所性の測定、そして GPU メモリ計測の代わりとなるデコードコストの計算。
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import torch
from einops import reduce
from torch import nn

from .base_backend import ConfigError, ShapeError
from .models import CausalVAE, latent_count

logger = logging.getLogger(__name__)

COST_MODES = ("full", "sliced", "sliced+downsampled")
LOCALITY_EPS = 1e-12
DEFAULT_WINDOW = 3


def frame_to_latent(i: int, r: int) -> int:
    """フレーム i を含む潜在インデックス (先頭フレームは単独で潜在 0)"""
    if i < 0:
        raise ShapeError(f"フレームインデックスは 0 以上である必要があります: {i}")
    return 0 if i == 0 else 1 + (i - 1) // r


def latent_frames(j: int, r: int, num_frames: Optional[int] = None) -> List[int]:
    """潜在 j が表すフレームインデックス"""
    frames = [0] if j == 0 else list(range(1 + r * (j - 1), 1 + r * j))
    if num_frames is not None:
        frames = [i for i in frames if i < num_frames]
    return frames


@dataclass(frozen=True)
class SliceWindow:
    """
    対象潜在 j で終わる因果的な窓

    Attributes:
        target: 対象の潜在インデックス j
        length: 窓長 w
        start: max(0, j − w + 1)
        frames: 窓が復元するフレームインデックス
    """
    target: int
    length: int
    start: int
    frames: Tuple[int, ...]

    @classmethod
    def build(cls, j: int, w: int, r: int, L: int) -> "SliceWindow":
        if not 1 <= w <= L:
            raise ConfigError(f"窓長は 1 ≤ w ≤ L である必要があります: w={w}, L={L}")
        if not 0 <= j < L:
            raise ShapeError(f"潜在インデックスが範囲外です: j={j}, L={L}")
        start = max(0, j - w + 1)
        frames = tuple(i for k in range(start, j + 1) for i in latent_frames(k, r))
        return cls(target=j, length=w, start=start, frames=frames)

    @property
    def latents(self) -> List[int]:
        return list(range(self.start, self.target + 1))


def merge_windows(J: Iterable[int], w: int) -> List[int]:
    """各 j の窓 [max(0, j−w+1), j] の和集合を昇順で返す"""
    merged = set()
    for j in J:
        merged.update(range(max(0, j - w + 1), j + 1))
    return sorted(merged)


@dataclass
class SlicedFrames:
    """
    部分デコードの結果

    Attributes:
        frames: (n, H, W, C)
        frame_indices: 各行に対応するフレームインデックス
        latent_indices: 復元した対象潜在インデックス
        window: 使用した窓長
    """
    frames: torch.Tensor
    frame_indices: List[int]
    latent_indices: List[int]
    window: int

    def select(self, indices: Sequence[int]) -> torch.Tensor:
        """指定フレームを (len(indices), H, W, C) として取り出す"""
        rows = []
        for i in indices:
            try:
                rows.append(self.frame_indices.index(i))
            except ValueError:
                raise ShapeError(f"フレーム {i} はデコードされていません (対象: {self.frame_indices})") from None
        return self.frames[rows]


def slice_decode(
    vae: CausalVAE,
    z: torch.Tensor,
    J: Iterable[int],
    w: int = DEFAULT_WINDOW,
    num_frames: Optional[int] = None,
) -> SlicedFrames:
    """
    対象潜在のフレームブロックを因果窓だけから復元

    Args:
        vae: デコーダーを持つモデル
        z: LatentTensor (L, h, w, c)
        J: 対象の潜在インデックス
        w: 窓長 (L を超える場合は L)
        num_frames: 元のフレーム数 (末尾ブロックの切り詰めに使う)

    Returns:
        SlicedFrames (自動微分で窓内の潜在へ勾配が流れる)

    Raises:
        ConfigError: J が空、または w < 1 の場合
    """
    targets = sorted(set(int(j) for j in J))
    if not targets:
        raise ConfigError("スライス対象の潜在インデックスが空です")
    if w < 1:
        raise ConfigError(f"窓長は 1 以上である必要があります: {w}")
    L = z.shape[0]
    w = min(w, L)

    blocks, indices = [], []
    for j in targets:
        window = SliceWindow.build(j, w, vae.temporal_rate, L)
        block = vae.decode_block(z, j, window.start)
        frames = latent_frames(j, vae.temporal_rate, num_frames)
        blocks.append(block[:len(frames)])
        indices.extend(frames)
    return SlicedFrames(frames=torch.cat(blocks, dim=0), frame_indices=indices, latent_indices=targets, window=w)


def spatial_downsample(z: torch.Tensor, factor: int) -> torch.Tensor:
    """
    空間方向の平均プーリング

    Args:
        z: (N, h, w, c)
        factor: 縮小率 (h, w を割り切ること)

    Raises:
        ShapeError: 割り切れない場合
    """
    if factor < 1:
        raise ShapeError(f"縮小率は 1 以上である必要があります: {factor}")
    if factor == 1:
        return z
    if z.shape[1] % factor or z.shape[2] % factor:
        raise ShapeError(f"空間サイズ {tuple(z.shape[1:3])} は縮小率 {factor} で割り切れません")
    return reduce(z, "n (h a) (w b) c -> n h w c", "mean", a=factor, b=factor)


def locality_map(vae: CausalVAE, x: torch.Tensor) -> torch.Tensor:
    """
    フレームを黒に置き換えたときの潜在の相対変化

    Args:
        vae: エンコーダーを持つモデル
        x: VideoTensor (F, H, W, C)

    Returns:
        (F, L) 行列。要素 (i, j) は ‖𝓔(x_i黒)_j − 𝓔(x)_j‖ / (‖𝓔(x)_j‖ + ε)
    """
    with torch.no_grad():
        base = vae.encode(x).to(torch.float64)
        base_norm = torch.linalg.vector_norm(base.flatten(1), dim=1)
        rows = []
        for i in range(x.shape[0]):
            blacked = x.clone()
            blacked[i] = 0.0
            diff = vae.encode(blacked).to(torch.float64) - base
            rows.append(torch.linalg.vector_norm(diff.flatten(1), dim=1) / (base_norm + LOCALITY_EPS))
    return torch.stack(rows)


def row_support(row: torch.Tensor, tol: float = 1e-6) -> List[int]:
    """相対変化が tol を超える潜在インデックス"""
    return [int(j) for j in torch.nonzero(row > tol).flatten()]


def is_contiguous(indices: Sequence[int]) -> bool:
    return not indices or list(indices) == list(range(indices[0], indices[-1] + 1))


@dataclass
class CostReport:
    """
    デコードコストの集計

    Attributes:
        mode: "full" / "sliced" / "sliced+downsampled"
        elements_decoded: デコーダーに渡した潜在要素数
        full_elements: 全潜在を縮小なしでデコードした場合の要素数
        ratio_vs_full: full_elements / elements_decoded
        downsample_factor: 適用した空間縮小率
        decoded_latents: デコードした潜在インデックス (窓の和集合)
        decoder_flops: デコーダーの概算 FLOPs
        full_flops: 全デコード時の概算 FLOPs
    """
    mode: str
    elements_decoded: int
    full_elements: int
    ratio_vs_full: float
    downsample_factor: int
    decoded_latents: List[int]
    decoder_flops: int
    full_flops: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def decoder_block_flops(vae: CausalVAE, latent_h: int, latent_w: int) -> int:
    """1 ブロック分のデコードにかかる畳み込みの乗加算数 ×2"""
    h, w = latent_h, latent_w
    flops = 0
    for module in vae.decoder:
        if isinstance(module, nn.Upsample):
            h, w = h * int(module.scale_factor), w * int(module.scale_factor)
        elif isinstance(module, nn.Conv2d):
            kh, kw = module.kernel_size
            flops += 2 * h * w * module.out_channels * module.in_channels * kh * kw
    return flops


def decode_cost(
    vae: CausalVAE,
    mode: str,
    F: int,
    J: Iterable[int] = (),
    w: int = DEFAULT_WINDOW,
    factor: int = 1,
    frame_size: Tuple[int, int] = (32, 32),
) -> CostReport:
    """
    フル / スライス / スライス+縮小 のデコードコストを正確に数える

    Args:
        vae: 対象モデル (r, s, c を参照)
        mode: "full" / "sliced" / "sliced+downsampled"
        F: フレーム数
        J: 対象の潜在インデックス
        w: 窓長
        factor: 空間縮小率 (sliced+downsampled のみ有効)
        frame_size: フレームの (H, W)

    Returns:
        CostReport
    """
    if mode not in COST_MODES:
        raise ConfigError(f"未知のコストモード: {mode} (選択肢: {', '.join(COST_MODES)})")
    L = latent_count(F, vae.temporal_rate)
    h, w_lat = frame_size[0] // vae.spatial_factor, frame_size[1] // vae.spatial_factor
    per_latent = h * w_lat * vae.latent_channels
    full_elements = L * per_latent
    full_flops = L * decoder_block_flops(vae, h, w_lat)

    if mode == "full":
        decoded, applied = list(range(L)), 1
    else:
        targets = list(J)
        if not targets:
            raise ConfigError("スライスモードには対象の潜在インデックスが必要です")
        decoded = merge_windows(targets, min(w, L))
        applied = factor if mode == "sliced+downsampled" else 1
        if h % applied or w_lat % applied:
            raise ShapeError(f"潜在サイズ {h}x{w_lat} は縮小率 {applied} で割り切れません")

    elements = len(decoded) * per_latent // (applied * applied)
    flops = len(decoded) * decoder_block_flops(vae, h // applied, w_lat // applied)
    report = CostReport(
        mode=mode,
        elements_decoded=elements,
        full_elements=full_elements,
        ratio_vs_full=full_elements / elements,
        downsample_factor=applied,
        decoded_latents=decoded,
        decoder_flops=flops,
        full_flops=full_flops,
    )
    logger.debug("デコードコスト: %s", report)
    return report


def window_reconstruction_error(
    vae: CausalVAE,
    z: torch.Tensor,
    windows: Sequence[int],
    J: Optional[Iterable[int]] = None,
) -> Dict[int, float]:
    """
    窓長ごとの対象フレームの全デコードからの平均二乗偏差

    Args:
        vae: モデル
        z: LatentTensor
        windows: 評価する窓長
        J: 対象潜在 (省略時は全潜在)

    Returns:
        {窓長: 平均二乗偏差}
    """
    targets = list(range(z.shape[0])) if J is None else sorted(set(J))
    with torch.no_grad():
        full = vae.decode(z)
        errors = {}
        for w in windows:
            sliced = slice_decode(vae, z, targets, w)
            reference = full[sliced.frame_indices]
            errors[int(w)] = torch.mean((sliced.frames - reference) ** 2).item()
    return errors
