"""
診断解析

レイアウト形成曲線、VLO アブレーション、タイムトラベル係数表。
評価指標は metrics モジュールのものをそのまま公開する。
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch

from .base_backend import ConfigError, FrameGuidanceError
from .conditions import KeyframeCondition
from .guidance import GuidanceResult, GuidanceRun, run_frame_guidance, tensor_digest
from .metrics import (
    guided_frame_l2,
    low_frequency_distance,
    saturation_score,
    temporal_coherence,
)
from .schedules import NoiseSchedule, beta_from_alpha_bar
from .slicing import spatial_downsample

logger = logging.getLogger(__name__)

ABLATION_VARIANTS = ("time_travel", "deterministic", "vlo")
KNEE_FRACTION = 0.2

__all__ = [
    "ABLATION_VARIANTS",
    "AblationReport",
    "LayoutCurve",
    "coefficient_table",
    "layout_formation_curve",
    "layout_knee_steps",
    "low_frequency_distance",
    "run_vlo_ablation",
    "saturation_score",
    "temporal_coherence",
]


@dataclass
class LayoutCurve:
    """
    各ステップの復元と最終ビデオの低周波距離

    Attributes:
        steps: ステップ t (T から 0 の順)
        distances: 各ステップの低周波 L2 距離
        t_L: レイアウトステージ境界
        t_D: ディテールステージ境界
        pool: 低周波化のプール率
    """
    steps: List[int]
    distances: List[float]
    t_L: int
    t_D: int
    pool: int = 4

    def knee_step(self, fraction: float = KNEE_FRACTION) -> Optional[int]:
        """距離が初期値の fraction 未満になる最初の推論ステップ (1 始まり)"""
        if not self.distances or self.distances[0] <= 0:
            return None
        threshold = fraction * self.distances[0]
        for k, d in enumerate(self.distances):
            if d < threshold:
                return k + 1
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "steps": list(self.steps),
            "distances": list(self.distances),
            "t_L": self.t_L,
            "t_D": self.t_D,
            "pool": self.pool,
            "knee_step": self.knee_step(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LayoutCurve":
        return cls(
            steps=[int(t) for t in data["steps"]],
            distances=[float(d) for d in data["distances"]],
            t_L=int(data["t_L"]),
            t_D=int(data["t_D"]),
            pool=int(data["pool"]),
        )


def layout_formation_curve(
    run: GuidanceRun,
    result: Optional[GuidanceResult] = None,
    pool: int = 4,
    factor: int = 1,
) -> LayoutCurve:
    """
    レイアウトがどのステップで確定するかを測る

    各ステップの z_{0|t} を (縮小して) 復号し、最終ビデオとの低周波距離を求める。

    Args:
        run: 実行設定 (result が無ければスナップショット付きで実行する)
        result: スナップショット付きで実行済みの結果
        pool: 低周波化の空間プール率
        factor: 復号前の潜在の空間縮小率

    Returns:
        LayoutCurve

    Raises:
        ConfigError: スナップショットが無い場合
        FrameGuidanceError: スナップショットのハッシュがトレースと一致しない場合
    """
    if result is None:
        result = run_frame_guidance(replace(run, record_snapshots=True))
    snapshots = result.trace.snapshots
    if not snapshots or 0 not in snapshots:
        raise ConfigError("レイアウト曲線には z_{0|t} のスナップショットが必要です (record_snapshots を有効にしてください)")
    for t, snapshot in snapshots.items():
        if tensor_digest(snapshot) != result.trace.snapshot_hashes.get(t):
            raise FrameGuidanceError(f"ステップ {t} のスナップショットがトレースのハッシュと一致しません")

    vae = run.models.vae

    def reconstruct(z: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return vae.decode(spatial_downsample(z, factor), run.num_frames)

    final = reconstruct(snapshots[0])
    steps = sorted(snapshots, reverse=True)
    distances = [low_frequency_distance(reconstruct(snapshots[t]), final, pool) for t in steps]
    curve = LayoutCurve(steps=steps, distances=distances, t_L=run.cfg.t_L, t_D=run.cfg.t_D, pool=pool)
    logger.info("レイアウト曲線: knee=%s", curve.knee_step())
    return curve


def layout_knee_steps(
    run: GuidanceRun,
    seeds: Sequence[int],
    pool: int = 4,
    factor: int = 1,
    fraction: float = KNEE_FRACTION,
) -> Dict[str, Any]:
    """
    シードごとのレイアウト曲線の knee と、その中央値

    Args:
        run: 実行設定
        seeds: 曲線を測るシード
        pool: 低周波化の空間プール率
        factor: 復号前の潜在の空間縮小率
        fraction: knee とみなす初期距離に対する割合

    Returns:
        {"seeds", "knee_steps", "median"}。曲線が fraction を下回らなかったシードの knee は None
    """
    knees = [
        layout_formation_curve(replace(run, seed=int(seed)), pool=pool, factor=factor).knee_step(fraction)
        for seed in seeds
    ]
    found = [k for k in knees if k is not None]
    median = float(np.median(found)) if found else None
    logger.info("レイアウト knee: 中央値=%s (%d/%d シードで検出)", median, len(found), len(knees))
    return {"seeds": [int(s) for s in seeds], "knee_steps": knees, "median": median}


@dataclass
class AblationReport:
    """
    VLO アブレーションの結果

    Attributes:
        seeds: 全変種で共有するシード
        guided_l2: 変種ごと・シードごとのガイド対象フレーム誤差
        coherence: 変種ごと・シードごとの時間的不連続度 (ガイダンスなしで正規化)
        saturation: 変種ごと・シードごとの飽和度
        baseline: シードごとのガイダンスなしの指標とビデオのハッシュ
    """
    seeds: List[int]
    guided_l2: Dict[str, List[float]] = field(default_factory=dict)
    coherence: Dict[str, List[float]] = field(default_factory=dict)
    saturation: Dict[str, List[float]] = field(default_factory=dict)
    baseline: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def seed_count(self) -> int:
        return len(self.seeds)

    def mean(self, metric: str, variant: str) -> float:
        return float(np.mean(getattr(self, metric)[variant]))

    def summary(self) -> Dict[str, Dict[str, float]]:
        return {
            variant: {
                "guided_l2": self.mean("guided_l2", variant),
                "coherence": self.mean("coherence", variant),
                "saturation": self.mean("saturation", variant),
            }
            for variant in self.guided_l2
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seeds": list(self.seeds),
            "seed_count": self.seed_count,
            "guided_l2": self.guided_l2,
            "coherence": self.coherence,
            "saturation": self.saturation,
            "baseline": self.baseline,
            "summary": self.summary(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AblationReport":
        return cls(
            seeds=list(data["seeds"]),
            guided_l2={k: list(v) for k, v in data["guided_l2"].items()},
            coherence={k: list(v) for k, v in data["coherence"].items()},
            saturation={k: list(v) for k, v in data["saturation"].items()},
            baseline=list(data["baseline"]),
        )


def _keyframe_error(video: torch.Tensor, keyframes: Sequence[KeyframeCondition]) -> float:
    return float(np.mean([guided_frame_l2(video, c.frames, c.targets.to(video.dtype)) for c in keyframes]))


def run_vlo_ablation(run: GuidanceRun, seeds: Sequence[int]) -> AblationReport:
    """
    タイムトラベルのみ / 決定的更新のみ / VLO を同じシードで比較

    Args:
        run: キーフレーム条件を含む実行設定
        seeds: 対にして使うシード

    Returns:
        AblationReport
    """
    keyframes = [c for c in run.conditions if isinstance(c, KeyframeCondition)]
    if not keyframes:
        raise ConfigError("VLO アブレーションにはキーフレーム条件が必要です")
    T = run.sched.T
    variants = {}
    for rule in ABLATION_VARIANTS:
        cfg = replace(run.cfg, update_rule=rule)
        if rule == "time_travel" and cfg.backend == "flow":
            cfg = replace(cfg, t_L=T)
        variants[rule] = cfg
    off = replace(run.cfg, t_L=T, t_D=T)

    report = AblationReport(seeds=[int(s) for s in seeds])
    for metric in ("guided_l2", "coherence", "saturation"):
        getattr(report, metric).update({rule: [] for rule in ABLATION_VARIANTS})

    for seed in report.seeds:
        baseline = run_frame_guidance(replace(run, cfg=off, seed=seed)).video
        base_coherence = temporal_coherence(baseline)
        report.baseline.append({
            "seed": seed,
            "guided_l2": _keyframe_error(baseline, keyframes),
            "coherence": base_coherence,
            "saturation": saturation_score(baseline),
            "digest": tensor_digest(baseline),
        })
        for rule, cfg in variants.items():
            video = run_frame_guidance(replace(run, cfg=cfg, seed=seed)).video
            report.guided_l2[rule].append(_keyframe_error(video, keyframes))
            coherence = temporal_coherence(video)
            report.coherence[rule].append(coherence / base_coherence if base_coherence > 0 else coherence)
            report.saturation[rule].append(saturation_score(video))
        logger.debug("VLO アブレーション seed=%d 完了", seed)

    logger.info("VLO アブレーション: %s", report.summary())
    return report


def coefficient_table(schedule: NoiseSchedule, steps: int = 3) -> List[Dict[str, float]]:
    """
    最初の推論ステップにおける再ノイズ係数 √β_t, √(1−β_t)

    Args:
        schedule: diffusion スケジュール
        steps: 表に含める推論ステップ数

    Returns:
        {"inference_step", "t", "sqrt_beta", "sqrt_one_minus_beta"} の行
    """
    rows = []
    for k in range(min(steps, schedule.T)):
        t = schedule.T - k
        beta = beta_from_alpha_bar(t, schedule)
        rows.append({
            "inference_step": k + 1,
            "t": t,
            "sqrt_beta": float(np.sqrt(beta)),
            "sqrt_one_minus_beta": float(np.sqrt(1.0 - beta)),
        })
    return rows
