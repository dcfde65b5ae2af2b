"""
ノイズスケジュールとサンプラー数式

拡散/フローマッチング両バックエンドが共有する純粋関数群:
Tweedie推定、DDIMステップ、フローマッチングのEulerステップ、順方向ノイズ付加。
乱数は全て明示的なシードから生成する。
"""

import math
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

from .base_backend import ScheduleError, ShapeError

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("diffusion", "flow")
DEFAULT_STEPS = 50


@dataclass(frozen=True)
class NoiseSchedule:
    """
    T ステップの離散ノイズスケジュール

    拡散では ᾱ_t、フローマッチングでは σ_t を保持する。時間軸は拡散の慣例に揃え、
    t = 0 がクリーンデータ、t = T が純粋なノイズとなる。

    Attributes:
        kind (str): "diffusion" または "flow"
        T (int): ステップ数
        alpha_bar (Optional[Tuple[float, ...]]): 長さ T+1 の ᾱ_t (diffusion のみ)
        sigma (Optional[Tuple[float, ...]]): 長さ T+1 の σ_t (flow のみ)
    """
    kind: str
    T: int
    alpha_bar: Optional[Tuple[float, ...]] = None
    sigma: Optional[Tuple[float, ...]] = None

    def validate(self) -> "NoiseSchedule":
        """
        スケジュールの不変条件を検証

        Returns:
            検証済みの自分自身

        Raises:
            ScheduleError: 不変条件が破られている場合
        """
        if self.kind not in SCHEDULE_KINDS:
            raise ScheduleError(f"未知のスケジュール種類: {self.kind}")
        if not isinstance(self.T, int) or self.T < 1:
            raise ScheduleError(f"ステップ数は正の整数である必要があります: {self.T}")

        values = self.alpha_bar if self.kind == "diffusion" else self.sigma
        if values is None or len(values) != self.T + 1:
            raise ScheduleError(f"{self.kind} スケジュールには長さ T+1 の系列が必要です")
        if any(not (0.0 <= v <= 1.0) for v in values):
            raise ScheduleError("スケジュール値は [0, 1] に収まる必要があります")

        if self.kind == "diffusion":
            if values[0] != 1.0 or values[-1] != 0.0:
                raise ScheduleError("diffusion スケジュールは ᾱ_0 = 1, ᾱ_T = 0 である必要があります")
            if any(b >= a for a, b in zip(values, values[1:])):
                raise ScheduleError("ᾱ_t は t について狭義単調減少である必要があります")
        else:
            if values[0] != 0.0 or values[-1] != 1.0:
                raise ScheduleError("flow スケジュールは σ_0 = 0, σ_T = 1 である必要があります")
            if any(b <= a for a, b in zip(values, values[1:])):
                raise ScheduleError("σ_t は t について狭義単調増加である必要があります")
        return self

    def alpha_bar_at(self, t: int) -> float:
        check_step(t, self)
        if self.alpha_bar is None:
            raise ScheduleError("このスケジュールは ᾱ_t を持ちません")
        return self.alpha_bar[t]

    def sigma_at(self, t: int) -> float:
        check_step(t, self)
        if self.sigma is None:
            raise ScheduleError("このスケジュールは σ_t を持ちません")
        return self.sigma[t]


@dataclass
class LatentState:
    """
    サンプリング途中の潜在状態

    Attributes:
        z: 潜在テンソル (L, h, w, c)
        t: 現在のステップ
        rng_seed: このステップでの確率的サンプリングに使うシード
    """
    z: torch.Tensor
    t: int
    rng_seed: int

    def check(self, schedule: NoiseSchedule) -> None:
        check_step(self.t, schedule)
        if not torch.isfinite(self.z).all():
            raise ScheduleError(f"ステップ {self.t} の潜在に非有限値が含まれています")


def cosine_schedule(T: int = DEFAULT_STEPS, s: float = 0.008) -> NoiseSchedule:
    """
    ᾱ_T を 0 に固定したコサインスケジュールを作成

    Args:
        T: ステップ数
        s: オフセット

    Returns:
        diffusion スケジュール
    """
    def f(t: int) -> float:
        return math.cos(((t / T) + s) / (1.0 + s) * math.pi / 2.0) ** 2

    f0 = f(0)
    alpha_bar = [f(t) / f0 for t in range(T + 1)]
    alpha_bar[0] = 1.0
    # 最初の推論ステップで √β_T が厳密に 0 になるよう固定する
    alpha_bar[T] = 0.0
    return NoiseSchedule(kind="diffusion", T=T, alpha_bar=tuple(alpha_bar)).validate()


def flow_schedule(T: int = DEFAULT_STEPS) -> NoiseSchedule:
    """一様な σ_t = t/T のフローマッチング用スケジュールを作成"""
    sigma = tuple(t / T for t in range(T + 1))
    return NoiseSchedule(kind="flow", T=T, sigma=sigma).validate()


def make_schedule(kind: str, T: int = DEFAULT_STEPS) -> NoiseSchedule:
    """種類名からスケジュールを作成"""
    if kind == "diffusion":
        return cosine_schedule(T)
    if kind == "flow":
        return flow_schedule(T)
    raise ScheduleError(f"未知のスケジュール種類: {kind}")


def check_step(t: int, schedule: NoiseSchedule, minimum: int = 0) -> None:
    """ステップ番号の範囲を検証"""
    if isinstance(t, bool) or not isinstance(t, (int, np.integer)):
        raise ScheduleError(f"ステップは整数である必要があります: {t!r}")
    if t < minimum or t > schedule.T:
        raise ScheduleError(f"ステップが範囲外です: t={t} (許容範囲 {minimum}..{schedule.T})")


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str = "テンソル") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}の形状が一致しません: {tuple(a.shape)} と {tuple(b.shape)}")


def _require_kind(schedule: NoiseSchedule, kind: str) -> None:
    if schedule.kind != kind:
        raise ScheduleError(f"{kind} スケジュールが必要です(受け取った種類: {schedule.kind})")


def tweedie_clean(z_t: torch.Tensor, v: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """
    v パラメータ化での Tweedie 推定 z_{0|t} = √ᾱ_t·z_t − √(1−ᾱ_t)·v

    Raises:
        ShapeError: z_t と v の形状が異なる場合
        ScheduleError: t が範囲外、またはスケジュールが diffusion でない場合
    """
    _require_kind(sched, "diffusion")
    check_same_shape(z_t, v, "z_t と v ")
    a_bar = sched.alpha_bar_at(t)
    return math.sqrt(a_bar) * z_t - math.sqrt(1.0 - a_bar) * v


def tweedie_clean_flow(z_t: torch.Tensor, v: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """フローマッチングのクリーン推定 z_{0|t} = z_t − σ_t·v"""
    _require_kind(sched, "flow")
    check_same_shape(z_t, v, "z_t と v ")
    return z_t - sched.sigma_at(t) * v


def forward_noise(z_0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """
    順方向のノイズ付加

    diffusion: √ᾱ_t·z_0 + √(1−ᾱ_t)·eps
    flow:      σ_t·eps + (1−σ_t)·z_0
    """
    check_same_shape(z_0, eps, "z_0 と eps ")
    if sched.kind == "diffusion":
        a_bar = sched.alpha_bar_at(t)
        return math.sqrt(a_bar) * z_0 + math.sqrt(1.0 - a_bar) * eps
    sigma = sched.sigma_at(t)
    return sigma * eps + (1.0 - sigma) * z_0


def ddim_step(z_t: torch.Tensor, z0_pred: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """
    決定的 DDIM ステップ (η_DDIM = 0)

    Args:
        z_t: ステップ t の潜在
        z0_pred: ステップ t での Tweedie 推定
        t: ステップ (t ≥ 1)
        sched: diffusion スケジュール

    Returns:
        z_{t−1} = √ᾱ_{t−1}·z0_pred + √(1−ᾱ_{t−1})·ε̂_t

    Raises:
        ScheduleError: t = 0、または t > 0 で ᾱ_t = 1 の場合
    """
    _require_kind(sched, "diffusion")
    check_step(t, sched, minimum=1)
    check_same_shape(z_t, z0_pred, "z_t と z0_pred ")
    a_bar_t = sched.alpha_bar_at(t)
    a_bar_prev = sched.alpha_bar_at(t - 1)
    if a_bar_t >= 1.0:
        raise ScheduleError(f"ᾱ_{t} = 1 のためノイズ推定ができません(スケジュールが不正)")
    eps_hat = (z_t - math.sqrt(a_bar_t) * z0_pred) / math.sqrt(1.0 - a_bar_t)
    return math.sqrt(a_bar_prev) * z0_pred + math.sqrt(1.0 - a_bar_prev) * eps_hat


def euler_flow_step(z_t: torch.Tensor, v: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """フローマッチングの Euler ステップ z_{t−1} = z_t + (σ_{t−1} − σ_t)·v"""
    _require_kind(sched, "flow")
    check_step(t, sched, minimum=1)
    check_same_shape(z_t, v, "z_t と v ")
    return z_t + (sched.sigma_at(t - 1) - sched.sigma_at(t)) * v


def beta_from_alpha_bar(t: int, sched: NoiseSchedule) -> float:
    """
    β_t = ᾱ_t / ᾱ_{t−1}

    Raises:
        ScheduleError: t < T で ᾱ_{t−1} = 0 の場合(スケジュールが不正)
    """
    _require_kind(sched, "diffusion")
    check_step(t, sched, minimum=1)
    a_bar_prev = sched.alpha_bar_at(t - 1)
    if a_bar_prev == 0.0:
        raise ScheduleError(f"ᾱ_{t - 1} = 0 のため β_{t} を定義できません")
    return sched.alpha_bar_at(t) / a_bar_prev


def velocity_target(z_0: torch.Tensor, eps: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """
    バックエンドごとの速度回帰ターゲット

    diffusion: v = √ᾱ_t·eps − √(1−ᾱ_t)·z_0
    flow:      v = eps − z_0 (直線経路上で t に依存しない)
    """
    check_same_shape(z_0, eps, "z_0 と eps ")
    if sched.kind == "diffusion":
        a_bar = sched.alpha_bar_at(t)
        return math.sqrt(a_bar) * eps - math.sqrt(1.0 - a_bar) * z_0
    check_step(t, sched)
    return eps - z_0


def standard_normal(
    shape: Sequence[int],
    seed: int,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """シードを固定した標準正規乱数"""
    generator = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=generator, dtype=dtype)


def child_seed(master_seed: int, *keys: int) -> int:
    """マスターシードと (ステップ, 反復) などのキーから子シードを導出"""
    sequence = np.random.SeedSequence([int(master_seed), *[int(k) for k in keys]])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])
