"""
図表バンドルの出力

ヒートマップ (局所性・勾配伝播) は PNG、折れ線 (レイアウト曲線・損失トレース) と
棒グラフ (コスト・アブレーション) は matplotlib で描画し、すべて同名の JSON と対にする。
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .analysis import AblationReport, LayoutCurve  # noqa: E402
from .base_backend import ConfigError, VideoFormatError  # noqa: E402
from .guidance import GradPropagationMap, GuidanceTrace, ShortcutAblationReport  # noqa: E402
from .slicing import CostReport  # noqa: E402
from .video_io import write_png  # noqa: E402

logger = logging.getLogger(__name__)

BUNDLE_MANIFEST = "figures.json"
HEATMAP_SCALE = 8


def heatmap_pixels(matrix: Union[torch.Tensor, np.ndarray], scale: int = HEATMAP_SCALE) -> np.ndarray:
    """行列を最大値で正規化した 8bit グレースケール画像 (行数×scale, 列数×scale)"""
    if scale < 1:
        raise ConfigError(f"ヒートマップの倍率は 1 以上である必要があります: {scale}")
    values = np.abs(np.asarray(matrix, dtype=np.float64))
    if values.ndim != 2:
        raise ConfigError(f"ヒートマップには 2 次元の行列が必要です: {values.shape}")
    peak = values.max() if values.size else 0.0
    normalized = values / peak if peak > 0 else np.zeros_like(values)
    pixels = np.round(normalized * 255.0).astype(np.uint8)
    return np.kron(pixels, np.ones((scale, scale), dtype=np.uint8))


def _write_json(path: Path, payload: Any) -> Path:
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False), encoding="utf-8")
    return path


def _save_plot(fig: "plt.Figure", path: Path) -> Path:
    try:
        fig.savefig(path, format="png", dpi=100)
    finally:
        plt.close(fig)
    return path


def _heatmap_section(out: Path, name: str, matrix: np.ndarray, data: Dict[str, Any], scale: int) -> Dict[str, Any]:
    image = write_png(out / f"{name}.png", heatmap_pixels(matrix, scale))
    _write_json(out / f"{name}.json", {**data, "scale": scale})
    return {"kind": "heatmap", "image": image.name, "json": f"{name}.json", "scale": scale, "shape": list(matrix.shape)}


def _layout_section(out: Path, curve: LayoutCurve) -> Dict[str, Any]:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(curve.steps, curve.distances, marker="o", markersize=2)
    ax.axvline(curve.t_L, linestyle="--", color="gray")
    ax.axvline(curve.t_D, linestyle=":", color="gray")
    ax.invert_xaxis()
    ax.set_xlabel("t")
    ax.set_ylabel("low-frequency L2")
    _save_plot(fig, out / "layout.png")
    _write_json(out / "layout.json", curve.to_dict())
    return {"kind": "line", "image": "layout.png", "json": "layout.json"}


def _trace_section(out: Path, trace: GuidanceTrace) -> Dict[str, Any]:
    fig, ax = plt.subplots(figsize=(5, 3))
    for stage in ("layout", "detail"):
        points = [(r.seq, r.loss) for r in trace.records if r.stage == stage]
        if points:
            xs, ys = zip(*points)
            ax.plot(xs, ys, ".", label=stage)
    ax.set_xlabel("repetition")
    ax.set_ylabel("loss")
    ax.legend()
    _save_plot(fig, out / "trace.png")
    _write_json(out / "trace.json", trace.to_dict())
    return {"kind": "line", "image": "trace.png", "json": "trace.json"}


def _bar_section(out: Path, name: str, labels: Sequence[str], values: Sequence[float], ylabel: str, data: Any) -> Dict[str, Any]:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(range(len(values)), values)
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, rotation=20)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save_plot(fig, out / f"{name}.png")
    _write_json(out / f"{name}.json", data)
    return {"kind": "bar", "image": f"{name}.png", "json": f"{name}.json"}


def emit_figure_bundle(
    out_dir: Union[str, Path],
    *,
    locality: Optional[torch.Tensor] = None,
    gradprop: Optional[GradPropagationMap] = None,
    layout: Optional[LayoutCurve] = None,
    trace: Optional[GuidanceTrace] = None,
    cost: Optional[List[CostReport]] = None,
    ablation: Optional[AblationReport] = None,
    shortcut: Optional[ShortcutAblationReport] = None,
    extra: Optional[Dict[str, Any]] = None,
    scale: int = HEATMAP_SCALE,
) -> Dict[str, Any]:
    """
    解析結果を画像と JSON の組として出力する

    Args:
        out_dir: 出力ディレクトリ (無ければ作成)
        locality: 局所性マップ (F, L)
        gradprop: 勾配伝播マップ
        layout: レイアウト形成曲線
        trace: ガイダンストレース
        cost: デコードコストのレポート列
        ablation: VLO アブレーション
        shortcut: shortcut アブレーション
        extra: JSON のみで出力する表 (名前 → データ)
        scale: ヒートマップの整数倍率

    Returns:
        マニフェスト (空のセクションは含まない)

    Raises:
        ConfigError: レポートが 1 つも無い場合
        VideoFormatError: 書き込みに失敗した場合
    """
    out = Path(out_dir)
    sections: Dict[str, Any] = {}
    try:
        out.mkdir(parents=True, exist_ok=True)
        if locality is not None:
            matrix = np.asarray(locality, dtype=np.float64)
            sections["locality"] = _heatmap_section(out, "locality", matrix, {"matrix": matrix.tolist()}, scale)
        if gradprop is not None:
            matrix = gradprop.norms.numpy()
            sections["gradprop"] = _heatmap_section(out, "gradprop", matrix, gradprop.to_dict(), scale)
        if layout is not None and layout.steps:
            sections["layout"] = _layout_section(out, layout)
        if trace is not None and trace.records:
            sections["trace"] = _trace_section(out, trace)
        if cost:
            sections["cost"] = _bar_section(
                out, "cost", [c.mode for c in cost], [c.ratio_vs_full for c in cost], "ratio vs full",
                [c.to_dict() for c in cost],
            )
        if ablation is not None and ablation.guided_l2:
            summary = ablation.summary()
            sections["ablation"] = _bar_section(
                out, "ablation", list(summary), [s["guided_l2"] for s in summary.values()], "guided-frame L2",
                ablation.to_dict(),
            )
        if shortcut is not None and shortcut.guided_l2:
            variants = list(shortcut.guided_l2)
            sections["shortcut"] = _bar_section(
                out, "shortcut", variants, [shortcut.mean("coherence", v) for v in variants], "coherence",
                shortcut.to_dict(),
            )
        for name, data in (extra or {}).items():
            if data:
                _write_json(out / f"{name}.json", data)
                sections[name] = {"kind": "table", "json": f"{name}.json"}
        if not sections:
            raise ConfigError("出力するレポートがありません")
        manifest = {"sections": sections}
        _write_json(out / BUNDLE_MANIFEST, manifest)
    except OSError as e:
        raise VideoFormatError(f"図表を書き込めません: {out}: {e}") from e

    logger.info("図表バンドルを出力しました: %s (%s)", out, ", ".join(sections))
    return manifest
