"""
ビデオ潜在最適化 (VLO)

レイアウトステージの決定的更新、拡散モデルのタイムトラベル、フローマッチング用の
タイムトラベル、勾配正規化、そして t_L / t_D / M / η を管理するステージ計画を提供する。
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import torch

from .base_backend import ConfigError, ScheduleError
from .schedules import (
    DEFAULT_STEPS,
    NoiseSchedule,
    beta_from_alpha_bar,
    check_same_shape,
    check_step,
    ddim_step,
    forward_noise,
    standard_normal,
)

logger = logging.getLogger(__name__)

STAGES = ("layout", "detail", "free")
M_SCHEDULES = ("constant", "linear_decay")
UPDATE_RULES = ("vlo", "time_travel", "deterministic")
GUIDANCE_MODES = ("full", "shortcut")

# バックエンド別の既定値 (推論ステップ数で指定)
BACKEND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "diffusion": {"eta": 3.0, "M": 10, "layout_steps": 5, "detail_steps": 15, "decay_span": 15},
    "flow": {"eta": 3.0, "M": 10, "layout_steps": 2, "detail_steps": 10, "decay_span": 10},
}


@dataclass
class GuidanceConfig:
    """
    ガイダンスのハイパーパラメータ

    Attributes:
        eta: ステップサイズ η (> 0)
        M: 各ガイダンスステップでの反復回数 (≥ 1)
        t_L: レイアウトステージの境界ステップ (t > t_L がレイアウト)
        t_D: ディテールステージの境界ステップ (t > t_D でガイダンス有効)
        normalize_grad: 勾配を L2 正規化してから η を掛けるか
        M_schedule: "constant" または "linear_decay"
        decay_span: linear_decay で M を 1 まで下げるステップ数
        backend: "diffusion" または "flow"
        update_rule: "vlo" / "time_travel" / "deterministic"
        mode: "full"(デノイザー越しに逆伝播) または "shortcut"
        layout_eta_scale: レイアウトステージでの η の倍率
    """
    eta: float = 3.0
    M: int = 10
    t_L: int = DEFAULT_STEPS - 5
    t_D: int = DEFAULT_STEPS - 20
    normalize_grad: bool = True
    M_schedule: str = "linear_decay"
    decay_span: int = 15
    backend: str = "diffusion"
    update_rule: str = "vlo"
    mode: str = "full"
    layout_eta_scale: float = 1.0

    @classmethod
    def for_backend(cls, backend: str, T: int = DEFAULT_STEPS, **overrides: Any) -> "GuidanceConfig":
        """
        バックエンドの既定値から設定を作成

        Args:
            backend: "diffusion" または "flow"
            T: 推論ステップ数
            **overrides: 上書きするフィールド (layout_steps / detail_steps も指定可)

        Returns:
            GuidanceConfig
        """
        if backend not in BACKEND_DEFAULTS:
            raise ConfigError(f"未知のバックエンド: {backend}")
        params = dict(BACKEND_DEFAULTS[backend])
        params.update(overrides)
        layout_steps = int(params.pop("layout_steps"))
        detail_steps = int(params.pop("detail_steps"))
        t_L = params.pop("t_L", max(0, T - layout_steps))
        t_D = params.pop("t_D", max(0, t_L - detail_steps))
        return cls(backend=backend, t_L=t_L, t_D=t_D, **params)

    def validate(self, T: int) -> "GuidanceConfig":
        """
        設定の整合性を検証

        Raises:
            ConfigError: 境界や値が不正な場合
        """
        if not (T >= self.t_L >= self.t_D >= 0):
            raise ConfigError(
                f"ステージ境界が不正です: T={T}, t_L={self.t_L}, t_D={self.t_D} "
                "(T ≥ t_L ≥ t_D ≥ 0 が必要)"
            )
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ConfigError(f"eta は正の有限値である必要があります: {self.eta}")
        if isinstance(self.M, bool) or not isinstance(self.M, int) or self.M < 1:
            raise ConfigError(f"M は 1 以上の整数である必要があります: {self.M}")
        if self.M_schedule not in M_SCHEDULES:
            raise ConfigError(f"未知の M_schedule: {self.M_schedule} (選択肢: {', '.join(M_SCHEDULES)})")
        if self.decay_span < 1:
            raise ConfigError(f"decay_span は 1 以上である必要があります: {self.decay_span}")
        if self.backend not in BACKEND_DEFAULTS:
            raise ConfigError(f"未知のバックエンド: {self.backend}")
        if self.update_rule not in UPDATE_RULES:
            raise ConfigError(f"未知の update_rule: {self.update_rule} (選択肢: {', '.join(UPDATE_RULES)})")
        if self.mode not in GUIDANCE_MODES:
            raise ConfigError(f"未知の mode: {self.mode} (選択肢: {', '.join(GUIDANCE_MODES)})")
        if not (self.layout_eta_scale > 0 and math.isfinite(self.layout_eta_scale)):
            raise ConfigError(f"layout_eta_scale は正の有限値である必要があります: {self.layout_eta_scale}")
        if self.backend == "flow" and self.update_rule == "time_travel" and self.t_L < T:
            # フローではタイムトラベルをレイアウトステージに使わない
            raise ConfigError("flow バックエンドでは update_rule=time_travel をレイアウトステージに適用できません")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class StageEntry:
    """1ステップ分のステージ割り当て"""
    t: int
    stage: str
    effective_M: int


@dataclass
class StagePlan:
    """
    ステップごとのステージ計画

    entries は t = T から 1 への推論順に並ぶ。
    """
    T: int
    entries: List[StageEntry] = field(default_factory=list)

    def entry(self, t: int) -> StageEntry:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"ステップが範囲外です: t={t} (許容範囲 1..{self.T})")
        return self.entries[self.T - t]

    def stage_at(self, t: int) -> str:
        return self.entry(t).stage

    def m_at(self, t: int) -> int:
        return self.entry(t).effective_M

    def steps_in(self, stage: str) -> List[int]:
        return [e.t for e in self.entries if e.stage == stage]

    def as_table(self) -> List[Dict[str, Any]]:
        """推論ステップ番号 (1 始まり) 付きの表形式"""
        return [
            {"inference_step": k + 1, "t": e.t, "stage": e.stage, "M": e.effective_M}
            for k, e in enumerate(self.entries)
        ]


def plan_stages(cfg: GuidanceConfig, sched: NoiseSchedule) -> StagePlan:
    """
    ステップごとのステージと実効 M を決定

    t > t_L はレイアウト、t_L ≥ t > t_D はディテール、それ以外はガイダンスなし。
    update_rule がアブレーション変種の場合はガイダンス区間全体を単一のステージとして扱う。

    Args:
        cfg: ガイダンス設定
        sched: ノイズスケジュール

    Returns:
        StagePlan

    Raises:
        ConfigError: 境界が不整合な場合
    """
    cfg.validate(sched.T)
    plan = StagePlan(T=sched.T)
    decay_index = 0

    for t in range(sched.T, 0, -1):
        if t <= cfg.t_D:
            plan.entries.append(StageEntry(t=t, stage="free", effective_M=0))
            continue

        natural = "layout" if t > cfg.t_L else "detail"
        if cfg.update_rule == "time_travel":
            stage = "detail"
        elif cfg.update_rule == "deterministic":
            stage = "layout"
        else:
            stage = natural

        if cfg.M_schedule == "constant" or natural == "layout":
            m_eff = cfg.M
        else:
            m_eff = _decayed_m(cfg.M, decay_index, cfg.decay_span)
            decay_index += 1
        plan.entries.append(StageEntry(t=t, stage=stage, effective_M=m_eff))

    logger.debug(
        "ステージ計画: layout=%d, detail=%d, free=%d",
        len(plan.steps_in("layout")), len(plan.steps_in("detail")), len(plan.steps_in("free")),
    )
    return plan


def _decayed_m(M: int, k: int, span: int) -> int:
    """decay span にわたって M から 1 まで線形に減らす"""
    if span <= 1:
        return M if k == 0 else 1
    frac = min(k, span - 1) / (span - 1)
    return max(1, int(math.floor(M - (M - 1) * frac + 0.5)))


def normalized_gradient(grad: torch.Tensor, normalize: bool) -> Optional[torch.Tensor]:
    """
    潜在全体を1つのベクトルとして L2 正規化した勾配

    Returns:
        正規化済み勾配。正規化が有効で ‖grad‖₂ = 0 の場合は None
    """
    if not normalize:
        return grad
    norm = torch.linalg.vector_norm(grad)
    if norm.item() == 0.0:
        return None
    return grad / norm


def deterministic_update(
    z_t: torch.Tensor,
    grad: torch.Tensor,
    cfg: GuidanceConfig,
    eta: Optional[float] = None,
) -> torch.Tensor:
    """
    決定的な勾配更新 z_t − η·ĝ

    Args:
        z_t: 潜在
        grad: z_t に関するガイダンス損失の勾配
        cfg: ガイダンス設定
        eta: η の上書き (レイアウトステージの倍率適用後の値など)

    Returns:
        更新後の潜在。正規化が有効で勾配がゼロの場合は z_t をそのまま返す
    """
    check_same_shape(z_t, grad, "z_t と grad ")
    step = cfg.eta if eta is None else eta
    g_hat = normalized_gradient(grad, cfg.normalize_grad)
    if g_hat is None:
        logger.warning("勾配ノルムが 0 のため更新をスキップしました")
        return z_t
    return z_t - step * g_hat


def renoise(z_prev: torch.Tensor, beta: float, eps: torch.Tensor) -> torch.Tensor:
    """ステップ t-1 の潜在をレベル t に戻す √β·z_prev + √(1−β)·eps"""
    check_same_shape(z_prev, eps, "z_prev と eps ")
    if not 0.0 <= beta <= 1.0:
        raise ScheduleError(f"β は [0, 1] に収まる必要があります: {beta}")
    return math.sqrt(beta) * z_prev + math.sqrt(1.0 - beta) * eps


def time_travel(
    z_t: torch.Tensor,
    z0_pred: torch.Tensor,
    grad: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    cfg: GuidanceConfig,
    seed: int,
) -> torch.Tensor:
    """
    拡散モデルのタイムトラベル更新

    DDIM で t-1 へ進め、勾配で更新した z_{t-1} をシード固定のノイズでレベル t へ戻す。
    t = T では √β_T = 0 のため勾配に関係なく ε そのものが返る。

    Raises:
        ScheduleError: t = 0 の場合
    """
    check_step(t, sched, minimum=1)
    z_prev = ddim_step(z_t, z0_pred, t, sched)
    z_prev = deterministic_update(z_prev, grad, cfg)
    eps = standard_normal(z_t.shape, seed, dtype=z_t.dtype)
    return renoise(z_prev, beta_from_alpha_bar(t, sched), eps)


def time_travel_flow(
    z0_pred: torch.Tensor,
    grad: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    cfg: GuidanceConfig,
    seed: int,
) -> torch.Tensor:
    """
    フローマッチング用のタイムトラベル

    クリーン推定を勾配で更新し、σ_t·ε + (1−σ_t)·z0 でレベル t に戻す。
    """
    z0_new = deterministic_update(z0_pred, grad, cfg)
    eps = standard_normal(z0_pred.shape, seed, dtype=z0_pred.dtype)
    return forward_noise(z0_new, t, eps, sched)
