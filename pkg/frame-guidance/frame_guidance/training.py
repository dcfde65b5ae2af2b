"""
トイモデルの学習ループ

VAE は再構成 MSE、デノイザーはバックエンドごとの速度ターゲットへの回帰で学習する。
損失が非有限値になった時点で学習を打ち切り、それまでのメトリクスを添えて NumericalError を送出する。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from .base_backend import ConfigError, NumericalError, SamplerBackend
from .models import CausalVAE, VelocityDenoiser
from .schedules import child_seed, standard_normal

logger = logging.getLogger(__name__)


@dataclass
class TrainingResult:
    """
    学習結果

    Attributes:
        model: 学習済みモデル
        losses: エポックごとの平均学習損失
        holdout_loss: ホールドアウト集合での損失
        epochs_completed: 通算の完了エポック数 (再開時は前回分を含む)
    """
    model: nn.Module
    losses: List[float] = field(default_factory=list)
    holdout_loss: Optional[float] = None
    epochs_completed: int = 0

    def metrics(self) -> Dict[str, Any]:
        return {
            "loss": list(self.losses),
            "holdout_loss": self.holdout_loss,
            "epochs_completed": self.epochs_completed,
        }


def split_holdout(dataset: Sequence[torch.Tensor], fraction: float) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
    """末尾の fraction をホールドアウトとして分割 (最低1クリップは学習に残す)"""
    if not dataset:
        raise ConfigError("データセットが空です")
    n_hold = min(len(dataset) - 1, int(round(len(dataset) * fraction)))
    n_train = len(dataset) - n_hold
    return list(dataset[:n_train]), list(dataset[n_train:])


def _batches(count: int, batch_size: int, seed: int) -> List[np.ndarray]:
    order = np.random.default_rng(seed).permutation(count)
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]


def _check_finite(value: float, what: str, result: TrainingResult) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"{what}が発散しました (エポック {result.epochs_completed + 1})", payload=result.metrics())


def train_vae(
    dataset: Sequence[torch.Tensor],
    epochs: int,
    seed: int,
    *,
    vae: Optional[CausalVAE] = None,
    start_epoch: int = 0,
    lr: float = 2e-3,
    batch_size: int = 8,
    holdout_fraction: float = 0.125,
    architecture: Optional[Dict[str, Any]] = None,
    progress: bool = False,
) -> TrainingResult:
    """
    因果的 VAE を学習

    Args:
        dataset: VideoTensor のリスト
        epochs: 今回実行するエポック数
        seed: 初期化とバッチ順序のシード
        vae: 再開する場合の既存モデル
        start_epoch: 再開時の完了済みエポック数
        lr: 学習率
        batch_size: バッチサイズ
        holdout_fraction: ホールドアウトに回す割合
        architecture: 新規作成時の CausalVAE 引数
        progress: tqdm の進捗表示

    Returns:
        TrainingResult (holdout_loss は再構成 MSE)

    Raises:
        ConfigError: データセットが空の場合
        NumericalError: 損失が非有限値になった場合
    """
    train_set, holdout = split_holdout(dataset, holdout_fraction)
    if vae is None:
        arch = dict(architecture or {})
        arch.setdefault("channels", int(train_set[0].shape[-1]))
        arch.setdefault("seed", seed)
        vae = CausalVAE(**arch)
    # 学習中は潜在スケールを 1 に戻してから最後に測り直す
    vae.latent_scale.fill_(1.0)
    vae.train()
    optimizer = torch.optim.Adam(vae.parameters(), lr=lr)
    clips = torch.stack(train_set)
    result = TrainingResult(model=vae, epochs_completed=start_epoch)

    for epoch in tqdm(range(start_epoch, start_epoch + epochs), desc="vae", disable=not progress):
        total, seen = 0.0, 0
        for index in _batches(len(clips), batch_size, child_seed(seed, epoch)):
            batch = clips[torch.as_tensor(index)]
            loss = torch.mean((vae(batch) - batch) ** 2)
            _check_finite(loss.item(), "VAE の再構成損失", result)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(index)
            seen += len(index)
        result.losses.append(total / seen)
        result.epochs_completed = epoch + 1
        logger.debug("VAE エポック %d: loss=%.6f", epoch + 1, result.losses[-1])

    vae.eval()
    with torch.no_grad():
        latents = torch.stack([vae.encode(clip) for clip in train_set])
        std = latents.std().item()
        vae.latent_scale.fill_(std if std > 0 and math.isfinite(std) else 1.0)
        result.holdout_loss = reconstruction_mse(vae, holdout or train_set)
    logger.info("VAE 学習完了: epochs=%d, holdout MSE=%.6f", result.epochs_completed, result.holdout_loss)
    return result


def reconstruction_mse(vae: CausalVAE, clips: Sequence[torch.Tensor]) -> float:
    """encode→decode の平均二乗誤差"""
    with torch.no_grad():
        errors = [torch.mean((vae.decode(vae.encode(x), x.shape[0]) - x) ** 2).item() for x in clips]
    return float(np.mean(errors))


def encode_dataset(vae: CausalVAE, dataset: Sequence[torch.Tensor]) -> torch.Tensor:
    """データセット全体を潜在 (N, L, h, w, c) に符号化"""
    with torch.no_grad():
        return torch.stack([vae.encode(clip) for clip in dataset])


def velocity_batch(
    backend: SamplerBackend,
    z0: torch.Tensor,
    seed: int,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    クリーン潜在のバッチから (z_t, t, 目標速度) を作成

    t は 1..T から一様に、ノイズはシードから生成する。
    """
    rng = np.random.default_rng(seed)
    steps = rng.integers(1, backend.T + 1, size=z0.shape[0])
    noisy, targets = [], []
    for k, (clean, t) in enumerate(zip(z0, steps)):
        eps = standard_normal(clean.shape, child_seed(seed, k), dtype=clean.dtype)
        noisy.append(backend.noise(clean, int(t), eps))
        targets.append(backend.training_target(clean, eps, int(t)))
    return torch.stack(noisy), torch.as_tensor(steps, dtype=z0.dtype), torch.stack(targets)


def train_denoiser(
    vae: CausalVAE,
    dataset: Sequence[torch.Tensor],
    backend: SamplerBackend,
    epochs: int,
    seed: int,
    *,
    denoiser: Optional[VelocityDenoiser] = None,
    start_epoch: int = 0,
    lr: float = 1e-3,
    batch_size: int = 8,
    holdout_fraction: float = 0.125,
    architecture: Optional[Dict[str, Any]] = None,
    progress: bool = False,
) -> TrainingResult:
    """
    速度予測デノイザーを学習

    Args:
        vae: 学習済み VAE (パラメータは固定)
        dataset: VideoTensor のリスト
        backend: 学習ターゲットを決めるバックエンド
        epochs: 今回実行するエポック数
        seed: シード
        denoiser: 再開する場合の既存モデル

    Returns:
        TrainingResult (holdout_loss は固定シードでの速度回帰 MSE)

    Raises:
        ConfigError: データセットが空、またはバックエンドが一致しない場合
        NumericalError: 損失が非有限値になった場合
    """
    train_set, holdout = split_holdout(dataset, holdout_fraction)
    if denoiser is None:
        arch = dict(architecture or {})
        arch.setdefault("latent_channels", vae.latent_channels)
        arch.setdefault("seed", seed)
        arch.update(backend=backend.name, max_steps=backend.T)
        denoiser = VelocityDenoiser(**arch)
    elif denoiser.backend != backend.name:
        raise ConfigError(f"デノイザーは {denoiser.backend} 用です (指定: {backend.name})")

    vae.eval()
    latents = encode_dataset(vae, train_set)
    holdout_latents = encode_dataset(vae, holdout or train_set)
    denoiser.train()
    optimizer = torch.optim.Adam(denoiser.parameters(), lr=lr)
    result = TrainingResult(model=denoiser, epochs_completed=start_epoch)

    for epoch in tqdm(range(start_epoch, start_epoch + epochs), desc="denoiser", disable=not progress):
        total, seen = 0.0, 0
        for b, index in enumerate(_batches(len(latents), batch_size, child_seed(seed, epoch))):
            z_t, steps, target = velocity_batch(backend, latents[torch.as_tensor(index)], child_seed(seed, epoch, b))
            loss = torch.mean((denoiser(z_t, steps) - target) ** 2)
            _check_finite(loss.item(), "速度回帰損失", result)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(index)
            seen += len(index)
        result.losses.append(total / seen)
        result.epochs_completed = epoch + 1
        logger.debug("デノイザー エポック %d: loss=%.6f", epoch + 1, result.losses[-1])

    denoiser.eval()
    result.holdout_loss = velocity_loss(denoiser, backend, holdout_latents, seed)
    logger.info("デノイザー学習完了: epochs=%d, holdout loss=%.6f", result.epochs_completed, result.holdout_loss)
    return result


def velocity_loss(denoiser: VelocityDenoiser, backend: SamplerBackend, latents: torch.Tensor, seed: int) -> float:
    """固定シードでの速度回帰 MSE"""
    with torch.no_grad():
        z_t, steps, target = velocity_batch(backend, latents, child_seed(seed, 0xFFFF))
        return torch.mean((denoiser(z_t, steps) - target) ** 2).item()
