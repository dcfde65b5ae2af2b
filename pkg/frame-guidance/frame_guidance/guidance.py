"""
Frame Guidance のオーケストレーター

各ステップ t (T → 1) で、ガイダンス区間なら M 回の反復ごとにクリーン推定を予測し、
対象潜在の因果窓だけを部分デコードして損失を評価し、その勾配で潜在を更新する。
レイアウトステージは決定的更新、ディテールステージはタイムトラベルを使い、
最後にバックエンドのデノイズステップで t−1 へ進む。
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .backend_factory import initial_noise, unguided_step
from .base_backend import ConfigError, NumericalError, ScheduleError
from .conditions import FrameCondition, KeyframeCondition
from .losses import composite_loss
from .metrics import adjacent_differences, frame_errors, guided_frame_l2, temporal_coherence
from .models import ModelBundle, latent_count
from .schedules import NoiseSchedule, child_seed
from .slicing import DEFAULT_WINDOW, slice_decode, spatial_downsample
from .vlo import GuidanceConfig, StagePlan, deterministic_update, plan_stages

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TraceRecord:
    """ガイダンス反復 1 回分の記録"""
    seq: int
    t: int
    m: int
    stage: str
    loss: float
    grad_norm: float


def tensor_digest(tensor: torch.Tensor) -> str:
    """テンソルの内容ハッシュ (sha256)"""
    array = np.ascontiguousarray(tensor.detach().cpu().numpy())
    return hashlib.sha256(array.tobytes()).hexdigest()


@dataclass
class GuidanceTrace:
    """
    ステップごとのトレース

    Attributes:
        records: 反復ごとの (t, m, stage, loss, grad_norm)
        snapshots: ステップ t のクリーン推定 z_{0|t} (記録を有効にした場合)
        snapshot_hashes: スナップショットの sha256
        aborted: 非有限値で中断したか
    """
    records: List[TraceRecord] = field(default_factory=list)
    snapshots: Dict[int, torch.Tensor] = field(default_factory=dict)
    snapshot_hashes: Dict[int, str] = field(default_factory=dict)
    aborted: bool = False

    def add(self, t: int, m: int, stage: str, loss: float, grad_norm: float) -> TraceRecord:
        record = TraceRecord(seq=len(self.records), t=t, m=m, stage=stage, loss=loss, grad_norm=grad_norm)
        self.records.append(record)
        return record

    def add_snapshot(self, t: int, z0: torch.Tensor) -> None:
        snapshot = z0.detach().clone()
        self.snapshots[t] = snapshot
        self.snapshot_hashes[t] = tensor_digest(snapshot)

    def losses_at(self, t: int) -> List[float]:
        return [r.loss for r in self.records if r.t == t]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "records": [r.__dict__ for r in self.records],
            "snapshot_hashes": {str(t): h for t, h in sorted(self.snapshot_hashes.items(), reverse=True)},
            "aborted": self.aborted,
        }


@dataclass
class GuidanceRun:
    """
    ガイド付きサンプリング 1 回分の入力

    Attributes:
        models: VAE / デノイザー / バックエンド
        cfg: ガイダンス設定
        conditions: フレーム条件のリスト
        num_frames: 生成するフレーム数 F
        window: スライス窓長 w
        downsample: デコード前の空間縮小率
        seed: マスターシード
        record_trace: 反復ごとのトレースを記録するか
        record_snapshots: 各ステップの z_{0|t} を保持するか
        frame_size: フレームの (H, W)
    """
    models: ModelBundle
    cfg: GuidanceConfig
    conditions: List[FrameCondition]
    num_frames: int
    window: int = DEFAULT_WINDOW
    downsample: int = 1
    seed: int = 0
    record_trace: bool = True
    record_snapshots: bool = False
    frame_size: Tuple[int, int] = (32, 32)

    @property
    def sched(self) -> NoiseSchedule:
        return self.models.backend.schedule

    @property
    def latent_shape(self) -> Tuple[int, int, int, int]:
        vae = self.models.vae
        frame_size = self.frame_size
        return (
            latent_count(self.num_frames, vae.temporal_rate),
            frame_size[0] // vae.spatial_factor,
            frame_size[1] // vae.spatial_factor,
            vae.latent_channels,
        )

    def guided_latents(self) -> List[int]:
        """𝓙: 全条件のガイド対象フレームを写した潜在インデックス"""
        r = self.models.vae.temporal_rate
        return sorted({j for c in self.conditions for j in c.latent_indices(r)})

    def validate(self) -> "GuidanceRun":
        """
        実行前の検証

        Raises:
            ConfigError: 設定・条件・インデックスが不正な場合
        """
        self.cfg.validate(self.sched.T)
        if self.cfg.backend != self.models.backend.name:
            raise ConfigError(f"設定のバックエンド {self.cfg.backend} とモデルのバックエンド {self.models.backend.name} が一致しません")
        if self.window < 1:
            raise ConfigError(f"スライス窓長は 1 以上である必要があります: {self.window}")
        if self.downsample < 1:
            raise ConfigError(f"空間縮小率は 1 以上である必要があります: {self.downsample}")
        for condition in self.conditions:
            condition.validate(self.num_frames)
        L = self.latent_shape[0]
        bad = [j for j in self.guided_latents() if not 0 <= j < L]
        if bad:
            raise ConfigError(f"ガイド対象の潜在インデックスが範囲外です: {bad} (L={L})")
        return self


@dataclass
class GuidanceResult:
    """ガイド付きサンプリングの結果"""
    video: torch.Tensor
    z0: torch.Tensor
    trace: GuidanceTrace
    plan: StagePlan


def guidance_loss(run: GuidanceRun, z0: torch.Tensor) -> torch.Tensor:
    """
    クリーン推定から全条件の重み付き損失を評価

    全条件の対象潜在の窓をまとめて 1 回だけ部分デコードする。
    """
    z_in = spatial_downsample(z0, run.downsample)
    decoded = slice_decode(run.models.vae, z_in, run.guided_latents(), run.window, run.num_frames)
    return composite_loss([(c.loss(decoded, run.downsample), c.weight) for c in run.conditions])


def latent_gradient(run: GuidanceRun, z: torch.Tensor, t: int) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    ガイダンス損失の勾配

    full モードではデノイザーと Tweedie 推定を通して z_t まで逆伝播する。
    shortcut モードでは勾配を z_{0|t} で止め、そのまま z_t の更新に使う。

    Returns:
        (損失, 勾配, クリーン推定)
    """
    models = run.models
    z_req = z.detach().requires_grad_(True)
    with torch.enable_grad():
        v = models.velocity(z_req, t)
        z0 = models.backend.predict_clean(z_req, v, t)
        if run.cfg.mode == "shortcut":
            z0 = z0.detach().requires_grad_(True)
            source = z0
        else:
            source = z_req
        loss = guidance_loss(run, z0)
        if not torch.isfinite(loss):
            raise NumericalError(f"ステップ {t} でガイダンス損失が非有限値になりました")
        (grad,) = torch.autograd.grad(loss, source)
    if not torch.isfinite(grad).all():
        raise NumericalError(f"ステップ {t} で勾配が非有限値になりました")
    return loss.detach(), grad, z0.detach()


def guidance_repetition(run: GuidanceRun, z: torch.Tensor, t: int, m: int, stage: str) -> Tuple[torch.Tensor, float, float]:
    """
    1 回分のガイダンス更新

    Returns:
        (更新後の潜在, 損失, 勾配ノルム)
    """
    cfg = run.cfg
    loss, grad, z0 = latent_gradient(run, z, t)
    z = z.detach()
    if stage == "layout":
        z_new = deterministic_update(z, grad, cfg, eta=cfg.eta * cfg.layout_eta_scale)
    else:
        z_new = run.models.backend.time_travel(z, z0, grad, t, cfg, child_seed(run.seed, t, m))
    return z_new, loss.item(), torch.linalg.vector_norm(grad).item()


def run_frame_guidance(
    run: GuidanceRun,
    z_start: Optional[torch.Tensor] = None,
    t_start: Optional[int] = None,
) -> GuidanceResult:
    """
    ガイド付きサンプリングを実行

    Args:
        run: 実行設定
        z_start: 開始潜在 (省略時はマスターシードから z_T を生成)
        t_start: 開始ステップ (省略時は T)

    Returns:
        GuidanceResult (復号したビデオとトレース)

    Raises:
        ConfigError: 設定が不正な場合
        NumericalError: 損失・勾配・潜在が非有限値になった場合 (payload はそれまでのトレース)
    """
    run.validate()
    models = run.models
    backend = models.backend
    plan = plan_stages(run.cfg, run.sched)
    trace = GuidanceTrace()
    t_start = backend.T if t_start is None else t_start
    if not 0 <= t_start <= backend.T:
        raise ScheduleError(f"開始ステップが範囲外です: {t_start}")

    z = initial_noise(run.latent_shape, run.seed, models.dtype) if z_start is None else z_start.detach()
    on_predict = trace.add_snapshot if run.record_snapshots else None
    logger.info(
        "ガイド付きサンプリング開始: backend=%s, T=%d, 条件=%d, 𝓙=%s",
        backend.name, backend.T, len(run.conditions), run.guided_latents(),
    )

    try:
        for t in range(t_start, 0, -1):
            entry = plan.entry(t)
            if entry.stage != "free" and run.conditions:
                for m in range(entry.effective_M):
                    z, loss, grad_norm = guidance_repetition(run, z, t, m, entry.stage)
                    if run.record_trace:
                        trace.add(t, m, entry.stage, loss, grad_norm)
                logger.debug("t=%d (%s, M=%d) 完了", t, entry.stage, entry.effective_M)
            z = unguided_step(models.denoiser, backend, z, t, on_predict)
            if not torch.isfinite(z).all():
                raise NumericalError(f"ステップ {t} で潜在が非有限値になりました")
    except NumericalError as e:
        trace.aborted = True
        e.payload = trace.to_dict()
        logger.error("ガイド付きサンプリングを中断しました: %s", e)
        raise

    if run.record_snapshots:
        trace.add_snapshot(0, z)
    with torch.no_grad():
        video = models.vae.decode(z, run.num_frames)
    return GuidanceResult(video=video, z0=z, trace=trace, plan=plan)


@dataclass
class GradPropagationMap:
    """
    ガイダンス勾配の潜在ごとのノルム

    Attributes:
        source_latents: ガイド対象の潜在インデックス
        steps: 計測したステップ
        norms: (len(steps), L) の ‖∂𝓛/∂(z_t)_j‖
        mode: "full" または "shortcut"
    """
    source_latents: List[int]
    steps: List[int]
    norms: torch.Tensor
    mode: str

    def support(self, row: int = 0, tol: float = 0.0) -> List[int]:
        return [int(j) for j in torch.nonzero(self.norms[row] > tol).flatten()]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "source_latents": self.source_latents,
            "steps": self.steps,
            "norms": self.norms.tolist(),
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GradPropagationMap":
        return cls(
            source_latents=[int(j) for j in data["source_latents"]],
            steps=[int(t) for t in data["steps"]],
            norms=torch.tensor(data["norms"], dtype=torch.float64),
            mode=str(data["mode"]),
        )


def grad_propagation_map(run: GuidanceRun, t_probe: Sequence[int]) -> GradPropagationMap:
    """
    ガイダンス勾配がどの潜在まで伝わるかを計測

    ガイダンスなしで z_T から各計測ステップまで進め、その時点の勾配を潜在ごとに集計する。

    Args:
        run: 実行設定 (cfg.mode で full / shortcut を切り替える)
        t_probe: 計測するステップ (単一の整数も可)

    Returns:
        GradPropagationMap
    """
    run.validate()
    steps = sorted({int(t_probe)} if isinstance(t_probe, int) else {int(t) for t in t_probe}, reverse=True)
    backend = run.models.backend
    if not steps or steps[0] > backend.T or steps[-1] < 1:
        raise ScheduleError(f"計測ステップが範囲外です: {steps}")

    z = initial_noise(run.latent_shape, run.seed, run.models.dtype)
    rows = []
    for t in range(backend.T, steps[-1] - 1, -1):
        if t in steps:
            _, grad, _ = latent_gradient(run, z, t)
            rows.append(torch.linalg.vector_norm(grad.flatten(1).to(torch.float64), dim=1))
        z = unguided_step(run.models.denoiser, backend, z, t)
    return GradPropagationMap(
        source_latents=run.guided_latents(), steps=steps, norms=torch.stack(rows), mode=run.cfg.mode
    )


def run_sdedit_v2v(run: GuidanceRun, source: torch.Tensor, t_start: int) -> GuidanceResult:
    """
    SDEdit 形式のビデオ編集

    元ビデオを符号化してステップ t_start までノイズを加え、そこからガイド付きで復元する。
    ノイズはマスターシードの z_T と同じ乱数を使うため、t_start = T ではノイズからの生成と一致する。

    Args:
        run: 実行設定 (通常はスタイル条件)
        source: 元ビデオ (F, H, W, C)
        t_start: 開始ステップ

    Returns:
        GuidanceResult
    """
    backend = run.models.backend
    if not 0 <= t_start <= backend.T:
        raise ScheduleError(f"開始ステップが範囲外です: {t_start}")
    if source.shape[0] != run.num_frames:
        raise ConfigError(f"元ビデオのフレーム数 {source.shape[0]} が設定 {run.num_frames} と一致しません")
    if t_start > run.cfg.t_L:
        logger.warning("開始ステップ %d はレイアウトステージ (t > %d) に含まれます", t_start, run.cfg.t_L)

    with torch.no_grad():
        z_src = run.models.vae.encode(source.to(run.models.dtype))
    if t_start == 0:
        run.validate()
        with torch.no_grad():
            video = run.models.vae.decode(z_src, run.num_frames)
        trace = GuidanceTrace()
        return GuidanceResult(video=video, z0=z_src, trace=trace, plan=plan_stages(run.cfg, run.sched))

    eps = initial_noise(z_src.shape, run.seed, z_src.dtype)
    z_start = backend.noise(z_src, t_start, eps)
    logger.info("SDEdit: t_start=%d から復元します", t_start)
    return run_frame_guidance(run, z_start=z_start, t_start=t_start)


@dataclass
class ShortcutAblationReport:
    """
    full / shortcut 逆伝播の比較

    Attributes:
        seeds: 使用したシード
        guided_frame: ガイド対象フレーム
        target_distance: 変種ごと・シードごとの全フレームのターゲット距離 (F,)
        coherence: 変種ごと・シードごとの時間的不連続度 (ガイダンスなしで正規化、基準が 0 なら None)
        local_coherence: ガイド対象フレーム周辺の隣接フレーム差 (ガイダンスなしで正規化、基準が 0 なら None)
        guided_l2: 変種ごと・シードごとのガイド対象フレームの誤差
        support: 変種ごとの T での勾配サポート (潜在インデックス)
    """
    seeds: List[int]
    guided_frame: int
    target_distance: Dict[str, List[List[float]]]
    coherence: Dict[str, List[Optional[float]]]
    local_coherence: Dict[str, List[Optional[float]]]
    guided_l2: Dict[str, List[float]]
    support: Dict[str, List[int]]

    def mean(self, metric: str, variant: str) -> float:
        """正規化できなかったシード (None) を除いた平均。全て None なら nan"""
        values = [v for v in getattr(self, metric)[variant] if v is not None]
        return float(np.mean(values)) if values else math.nan

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seeds": self.seeds,
            "guided_frame": self.guided_frame,
            "target_distance": self.target_distance,
            "coherence": self.coherence,
            "local_coherence": self.local_coherence,
            "guided_l2": self.guided_l2,
            "support": self.support,
        }


SHORTCUT_VARIANTS = ("unguided", "full", "shortcut")


def _ratio(value: float, baseline: float) -> Optional[float]:
    """基準が 0 で値が正なら比は定義できないので None (JSON では null)"""
    if baseline > 0:
        return value / baseline
    return None if value > 0 else 1.0


def run_shortcut_ablation(run: GuidanceRun, seeds: Sequence[int]) -> ShortcutAblationReport:
    """
    full 逆伝播と shortcut の比較実験

    Args:
        run: 中間フレーム 1 枚のキーフレーム条件を持つ実行設定
        seeds: 対にして使うシード

    Returns:
        ShortcutAblationReport
    """
    keyframes = [c for c in run.conditions if isinstance(c, KeyframeCondition)]
    if len(keyframes) != 1 or len(keyframes[0].frames) != 1:
        raise ConfigError("shortcut アブレーションには 1 フレームのキーフレーム条件が 1 つ必要です")
    condition = keyframes[0]
    guided = condition.frames[0]
    target = condition.targets[0]
    r = run.models.vae.temporal_rate
    lo, hi = max(0, guided - r), min(run.num_frames - 1, guided + r)

    report = ShortcutAblationReport(
        seeds=[int(s) for s in seeds],
        guided_frame=guided,
        target_distance={v: [] for v in SHORTCUT_VARIANTS},
        coherence={v: [] for v in SHORTCUT_VARIANTS},
        local_coherence={v: [] for v in SHORTCUT_VARIANTS},
        guided_l2={v: [] for v in SHORTCUT_VARIANTS},
        support={},
    )
    for mode in ("full", "shortcut"):
        probe = replace(run, cfg=replace(run.cfg, mode=mode))
        report.support[mode] = grad_propagation_map(probe, run.sched.T).support(tol=0.0)

    off = replace(run.cfg, t_L=run.sched.T, t_D=run.sched.T)
    for seed in report.seeds:
        videos = {
            "unguided": run_frame_guidance(replace(run, cfg=off, seed=seed)).video,
            "full": run_frame_guidance(replace(run, cfg=replace(run.cfg, mode="full"), seed=seed)).video,
            "shortcut": run_frame_guidance(replace(run, cfg=replace(run.cfg, mode="shortcut"), seed=seed)).video,
        }
        base_coherence = temporal_coherence(videos["unguided"])
        base_local = adjacent_differences(videos["unguided"])[lo:hi].mean().item()
        for variant, video in videos.items():
            report.target_distance[variant].append(frame_errors(video, target.to(video.dtype)).tolist())
            report.coherence[variant].append(_ratio(temporal_coherence(video), base_coherence))
            report.local_coherence[variant].append(_ratio(adjacent_differences(video)[lo:hi].mean().item(), base_local))
            report.guided_l2[variant].append(guided_frame_l2(video, [guided], target.unsqueeze(0).to(video.dtype)))
        logger.debug("shortcut アブレーション seed=%d 完了", seed)
    return report
