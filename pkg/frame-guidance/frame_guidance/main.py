"""
Frame Guidance - メインエントリーポイント

トイビデオモデルのデータセット生成・学習・ガイド付き生成・診断解析を行う。

使用方法:
    frame-guidance [--config PATH] [--seed N] [--out DIR] dataset
    frame-guidance train {vae,denoiser}
    frame-guidance generate {keyframe,style,loop,encoded,masked,composite,sdedit} [--baseline] [--guidance-off]
    frame-guidance analyze {locality,cost,layout,gradprop,shortcut,vlo-ablation,slicing,coefficients}

グローバルフラグはサブコマンドの前後どちらにも置ける。
優先順位はフラグ > 設定ファイル > 既定値。
"""

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import colorlog
import torch

from .analysis import coefficient_table, layout_formation_curve, layout_knee_steps, run_vlo_ablation
from .backend_factory import BackendFactory
from .base_backend import ConfigError, NumericalError
from .checkpoint import checkpoint_exists, load_checkpoint, save_checkpoint
from .conditions import build_condition
from .config_manager import ANALYSES, TASKS, ConfigManager
from .dataset import generate_dataset, make_specs
from .error_handler import EXIT_INTERRUPTED, EXIT_OK, EXIT_USER, ErrorHandler
from .figures import emit_figure_bundle
from .guidance import (
    GuidanceResult,
    GuidanceRun,
    grad_propagation_map,
    run_frame_guidance,
    run_sdedit_v2v,
    run_shortcut_ablation,
)
from .models import ModelBundle
from .slicing import (
    COST_MODES,
    decode_cost,
    frame_to_latent,
    is_contiguous,
    locality_map,
    row_support,
    window_reconstruction_error,
)
from .training import train_denoiser, train_vae
from .video_io import read_video, write_video

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
RUN_LOG_NAME = "frame-guidance.log"

logger = logging.getLogger(__name__)


def setup_logging(verbose: bool = False) -> Path:
    """
    ロギングを初期化する

    一時ディレクトリにログファイルを作成し、詳細モードでは colorlog で標準エラーにも出力する。
    実行ディレクトリが決まった後は add_run_log で同じログを実行ディレクトリにも書く。

    Args:
        verbose: DEBUG レベルとコンソール出力を有効にするか

    Returns:
        一時ログファイルのパス
    """
    level = logging.DEBUG if verbose else logging.INFO
    log_fd, log_file_path = tempfile.mkstemp(prefix="frame-guidance-", suffix=".log", text=True)
    os.close(log_fd)
    log_file = Path(log_file_path)

    handlers: List[logging.Handler] = [logging.FileHandler(str(log_file), encoding="utf-8")]
    if verbose:
        print(f"ログファイル: {log_file}", file=sys.stderr)
        stream = colorlog.StreamHandler(sys.stderr)
        stream.setFormatter(colorlog.ColoredFormatter("%(log_color)s%(levelname)-8s%(reset)s %(name)s: %(message)s"))
        handlers.append(stream)
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)
    return log_file


def add_run_log(run_dir: Path) -> Path:
    """実行ディレクトリにログファイルを追加"""
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / RUN_LOG_NAME
    handler = logging.FileHandler(str(path), encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return path


class _ArgumentParser(argparse.ArgumentParser):
    """使い方の誤りを終了コード 1 で報告するパーサー"""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"❌ {message}", file=sys.stderr)
        sys.exit(EXIT_USER)


def _global_flags() -> _ArgumentParser:
    common = _ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", "-c", type=str, help="設定ファイル (YAML / JSON) のパス")
    common.add_argument("--seed", type=int, help="マスターシード (設定ファイルより優先)")
    common.add_argument("--out", type=str, help="実行ディレクトリ (設定ファイルより優先)")
    common.add_argument("--baseline", action="store_true", help="同じシードのガイダンスなしビデオも出力する")
    common.add_argument("--guidance-off", action="store_true", help="ガイダンスを無効にして生成する")
    common.add_argument("--verbose", "-v", action="store_true", help="詳細ログを有効にする")
    return common


def parse_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """
    コマンドライン引数を解析する

    Returns:
        command / target / task / which と グローバルフラグを含む Namespace
    """
    common = _global_flags()
    parser = _ArgumentParser(
        prog="frame-guidance",
        description="Frame Guidance: トイビデオモデルでのフレーム単位ガイダンス",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
        parents=[common],
    )
    parser.add_argument("--version", action="version", version="%(prog)s 1.0.0")
    commands = parser.add_subparsers(dest="command", metavar="{dataset,train,generate,analyze}")
    commands.required = True

    commands.add_parser("dataset", parents=[common], help="合成データセットを生成する")
    train = commands.add_parser("train", parents=[common], help="モデルを学習する")
    train.add_argument("target", choices=("vae", "denoiser"))
    generate = commands.add_parser("generate", parents=[common], help="ガイド付きでビデオを生成する")
    generate.add_argument("task", choices=TASKS)
    analyze = commands.add_parser("analyze", parents=[common], help="診断解析を実行する")
    analyze.add_argument("which", choices=ANALYSES)
    return parser.parse_args(argv)


def _write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False, default=str), encoding="utf-8")
    return path


def _dtype(manager: ConfigManager) -> torch.dtype:
    return torch.float64 if manager.config["run"]["dtype"] == "float64" else torch.float32


def _seeds(manager: ConfigManager) -> List[int]:
    analysis = manager.config["analysis"]
    if analysis.get("seeds"):
        return [int(s) for s in analysis["seeds"]]
    return list(range(manager.seed, manager.seed + analysis["seed_count"]))


def _require_checkpoint(manager: ConfigManager, key: str, hint: str) -> Path:
    path = manager.path("model", key)
    if not checkpoint_exists(path):
        raise ConfigError(f"{key} のチェックポイントがありません: {path} ({hint} を先に実行してください)")
    return path


def _load_dataset(manager: ConfigManager) -> List[torch.Tensor]:
    data_dir = manager.path("dataset", "dir")
    clips = sorted(p for p in data_dir.glob("clip_*") if p.is_dir()) if data_dir.exists() else []
    if not clips:
        raise ConfigError(f"データセットが見つかりません: {data_dir} (frame-guidance dataset を先に実行してください)")
    return [read_video(p)[0] for p in clips]


def _synthetic_clips(manager: ConfigManager, count: int) -> List[torch.Tensor]:
    data = manager.config["dataset"]
    return generate_dataset(count, data["frames"], data["height"], data["width"], manager.seed, data["channels"])


def load_vae(manager: ConfigManager):
    vae, _ = load_checkpoint(_require_checkpoint(manager, "vae", "frame-guidance train vae"))
    return vae.to(_dtype(manager)).eval()


def load_models(manager: ConfigManager) -> ModelBundle:
    """チェックポイントから推論用のモデル一式を読み込む"""
    model = manager.config["model"]
    vae = load_vae(manager)
    denoiser, _ = load_checkpoint(_require_checkpoint(manager, "denoiser", "frame-guidance train denoiser"))
    if denoiser.backend != model["backend"]:
        raise ConfigError(f"デノイザーは {denoiser.backend} 用です (設定: {model['backend']})")
    backend = BackendFactory().create_backend({"backend": model["backend"], "steps": model["steps"]})
    return ModelBundle(vae=vae, denoiser=denoiser.to(_dtype(manager)), backend=backend).freeze()


def build_run(manager: ConfigManager, models: ModelBundle, task: Optional[str] = None) -> GuidanceRun:
    """設定から GuidanceRun を組み立てて検証する"""
    data = manager.config["dataset"]
    guidance = manager.config["guidance"]
    num_frames = data["frames"]
    conditions = [
        build_condition(entry, num_frames, manager.base_dir, data["channels"], manager.seed)
        for entry in manager.conditions(task)
    ]
    run = GuidanceRun(
        models=models,
        cfg=manager.guidance_config(task),
        conditions=conditions,
        num_frames=num_frames,
        window=guidance["window"],
        downsample=guidance["downsample"],
        seed=manager.seed,
        frame_size=(data["height"], data["width"]),
    )
    return run.validate()


def cmd_dataset(manager: ConfigManager) -> Path:
    """合成データセットをコンテナとして書き出す"""
    data = manager.config["dataset"]
    seed = manager.seed
    clips = generate_dataset(data["clips"], data["frames"], data["height"], data["width"], seed, data["channels"])
    specs = make_specs(data["clips"], data["height"], data["width"], seed)
    out = manager.path("dataset", "dir")
    for index, (spec, clip) in enumerate(zip(specs, clips)):
        write_video(
            out / f"clip_{index:04d}",
            clip,
            fps=manager.config["run"]["fps"],
            seed=seed,
            provenance={"generator": "moving_shapes", "index": index, "spec": asdict(spec)},
        )
    logger.info("データセットを書き出しました: %s (%d クリップ)", out, len(clips))
    print(f"✅ データセット: {out} ({len(clips)} クリップ)")
    return out


def cmd_train(manager: ConfigManager, target: str) -> Path:
    """
    VAE またはデノイザーを学習してチェックポイントを保存

    発散した場合もメトリクス JSON を書いてから NumericalError を再送出する。
    """
    train = manager.config["train"]
    model = manager.config["model"]
    seed = manager.seed
    dataset = _load_dataset(manager)
    ckpt = manager.path("model", target)
    metrics_path = manager.run_dir / f"train_{target}_metrics.json"

    previous, start_epoch = None, 0
    if train["resume"] and checkpoint_exists(ckpt):
        previous, manifest = load_checkpoint(ckpt)
        start_epoch = int(manifest.get("epochs_completed", 0))
        logger.info("%s の学習をエポック %d から再開します", target, start_epoch)

    try:
        if target == "vae":
            epochs = train["vae_epochs"]
            result = train_vae(
                dataset, epochs, seed,
                vae=previous, start_epoch=start_epoch, lr=train["vae_lr"],
                batch_size=train["batch_size"], holdout_fraction=train["holdout_fraction"],
                architecture=model["vae_architecture"], progress=True,
            )
        else:
            vae = load_vae(manager).to(torch.float32)
            backend = BackendFactory().create_backend({"backend": model["backend"], "steps": model["steps"]})
            epochs = train["denoiser_epochs"]
            result = train_denoiser(
                vae, dataset, backend, epochs, seed,
                denoiser=previous, start_epoch=start_epoch, lr=train["denoiser_lr"],
                batch_size=train["batch_size"], holdout_fraction=train["holdout_fraction"],
                architecture=model["denoiser_architecture"], progress=True,
            )
    except NumericalError as e:
        _write_json(metrics_path, e.payload or {})
        raise

    _write_json(metrics_path, result.metrics())
    extra: Dict[str, Any] = {
        "seed": seed,
        "budget": {"epochs": epochs, "lr": train[f"{target}_lr"], "batch_size": train["batch_size"]},
        "epochs_completed": result.epochs_completed,
        "holdout_loss": result.holdout_loss,
    }
    if target == "vae":
        extra["latent_scale"] = float(result.model.latent_scale)
        if result.holdout_loss is not None and result.holdout_loss > train["max_holdout_mse"]:
            logger.warning("ホールドアウト再構成 MSE %.6f がしきい値 %.6f を超えています", result.holdout_loss, train["max_holdout_mse"])
    manifest_path = save_checkpoint(result.model, ckpt, extra=extra)
    print(f"✅ {target} を学習しました: {manifest_path} (holdout={result.holdout_loss:.6f})")
    return manifest_path


def _guidance_off(run: GuidanceRun) -> GuidanceRun:
    T = run.sched.T
    return replace(run, cfg=replace(run.cfg, t_L=T, t_D=T))


def _sample(manager: ConfigManager, run: GuidanceRun, task: str) -> GuidanceResult:
    if task != "sdedit":
        return run_frame_guidance(run)
    source_spec = manager.config["task"].get("source")
    if not source_spec or "video" not in source_spec:
        raise ConfigError("sdedit には task.source.video が必要です")
    source, _ = read_video(manager.base_dir / source_spec["video"])
    return run_sdedit_v2v(run, source, manager.config["task"]["t_start"])


def cmd_generate(manager: ConfigManager, task: str, baseline: bool = False, guidance_off: bool = False) -> Path:
    """
    タスクのガイド付き生成

    条件とガイダンス設定はモデルの計算前にすべて検証する。
    """
    manager.conditions(task)
    manager.guidance_config(task)
    models = load_models(manager)
    run = build_run(manager, models, task)
    if guidance_off:
        run = _guidance_off(run)
    run_dir = manager.run_dir
    trace_path = run_dir / "trace.json"
    provenance = {"task": task, "backend": models.backend.name, "guidance": run.cfg.to_dict(), "guidance_off": guidance_off}

    try:
        result = _sample(manager, run, task)
    except NumericalError as e:
        _write_json(trace_path, {"task": task, "seed": run.seed, "trace": e.payload})
        raise

    fps = manager.config["run"]["fps"]
    write_video(run_dir / "video", result.video, fps=fps, seed=run.seed, provenance=provenance)
    _write_json(trace_path, {
        "task": task,
        "seed": run.seed,
        "guidance": run.cfg.to_dict(),
        "plan": result.plan.as_table(),
        "trace": result.trace.to_dict(),
    })
    if baseline:
        reference = _sample(manager, _guidance_off(run), task)
        write_video(
            run_dir / "baseline", reference.video, fps=fps, seed=run.seed,
            provenance={**provenance, "guidance_off": True},
        )
    print(f"✅ {task} を生成しました: {run_dir / 'video'}")
    return run_dir


def _analyze_locality(manager: ConfigManager) -> Dict[str, Any]:
    vae = load_vae(manager)
    clips = _synthetic_clips(manager, manager.config["analysis"]["clips"])
    maps = [locality_map(vae, clip.to(_dtype(manager))) for clip in clips]
    rows = []
    for index, matrix in enumerate(maps):
        for frame, row in enumerate(matrix):
            support = row_support(row)
            rows.append({
                "clip": index,
                "frame": frame,
                "support": support,
                "contiguous": is_contiguous(support),
                "argmax": int(torch.argmax(row)),
                "expected": frame_to_latent(frame, vae.temporal_rate),
            })
    return {"locality": maps[0], "extra": {"locality_rows": rows}}


def _analyze_cost(manager: ConfigManager) -> Dict[str, Any]:
    vae = load_vae(manager)
    data = manager.config["dataset"]
    analysis = manager.config["analysis"]
    J = sorted({frame_to_latent(int(i), vae.temporal_rate) for i in analysis["frames"]})
    reports = [
        decode_cost(vae, mode, data["frames"], J, manager.config["guidance"]["window"],
                    analysis["factor"] if mode == "sliced+downsampled" else 1, (data["height"], data["width"]))
        for mode in COST_MODES
    ]
    return {"cost": reports}


def _analyze_slicing(manager: ConfigManager) -> Dict[str, Any]:
    vae = load_vae(manager)
    analysis = manager.config["analysis"]
    clip = _synthetic_clips(manager, 1)[0].to(_dtype(manager))
    with torch.no_grad():
        z = vae.encode(clip)
    J = sorted({frame_to_latent(int(i), vae.temporal_rate) for i in analysis["frames"]})
    errors = window_reconstruction_error(vae, z, [int(w) for w in analysis["windows"]], J)
    return {"extra": {"slicing": {str(w): e for w, e in errors.items()}}}


def _analyze_coefficients(manager: ConfigManager) -> Dict[str, Any]:
    model = manager.config["model"]
    backend = BackendFactory().create_backend({"backend": model["backend"], "steps": model["steps"]})
    rows = coefficient_table(backend.schedule, manager.config["analysis"]["coefficient_steps"])
    return {"extra": {"coefficients": rows}}


def _analyze_with_run(manager: ConfigManager, which: str) -> Dict[str, Any]:
    run = build_run(manager, load_models(manager))
    analysis = manager.config["analysis"]
    if which == "layout":
        result = run_frame_guidance(replace(run, record_snapshots=True))
        return {
            "layout": layout_formation_curve(run, result, pool=analysis["pool"]),
            "trace": result.trace,
            "extra": {"layout_knees": layout_knee_steps(run, _seeds(manager), pool=analysis["pool"])},
        }
    if which == "gradprop":
        return {"gradprop": grad_propagation_map(run, [int(t) for t in analysis["t_probe"]])}
    if which == "shortcut":
        return {"shortcut": run_shortcut_ablation(run, _seeds(manager))}
    return {"ablation": run_vlo_ablation(run, _seeds(manager))}


def cmd_analyze(manager: ConfigManager, which: str) -> Dict[str, Any]:
    """
    解析を実行して図表バンドルを書き出す

    Returns:
        図表バンドルのマニフェスト
    """
    handlers = {
        "locality": _analyze_locality,
        "cost": _analyze_cost,
        "slicing": _analyze_slicing,
        "coefficients": _analyze_coefficients,
    }
    if which in handlers:
        reports = handlers[which](manager)
    elif which in ANALYSES:
        reports = _analyze_with_run(manager, which)
    else:
        raise ConfigError(f"未知の解析: {which} (選択肢: {', '.join(ANALYSES)})")
    out = manager.run_dir / "analysis" / which
    manifest = emit_figure_bundle(out, scale=manager.config["analysis"]["scale"], **reports)
    print(f"✅ 解析 {which} を出力しました: {out}")
    return manifest


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    メイン処理

    Returns:
        終了コード (0: 成功, 1: 設定・入力エラー, 2: 数値エラー, 3: 入出力エラー, 130: 中断)
    """
    args = parse_arguments(argv)
    verbose = getattr(args, "verbose", False)
    setup_logging(verbose)
    error_handler = ErrorHandler(verbose=verbose)

    try:
        manager = ConfigManager()
        config_path = getattr(args, "config", None)
        if config_path:
            manager.load_config(config_path)
        manager.apply_overrides(seed=getattr(args, "seed", None), out=getattr(args, "out", None))
        run_dir = manager.run_dir
        add_run_log(run_dir)
        manager.write_resolved(run_dir)
        logger.info("コマンド開始: %s (%s)", args.command, manager)

        if args.command == "dataset":
            cmd_dataset(manager)
        elif args.command == "train":
            cmd_train(manager, args.target)
        elif args.command == "generate":
            cmd_generate(
                manager, args.task,
                baseline=getattr(args, "baseline", False),
                guidance_off=getattr(args, "guidance_off", False),
            )
        else:
            cmd_analyze(manager, args.which)

    except KeyboardInterrupt:
        print("⛔ 操作が中断されました", file=sys.stderr)
        return EXIT_INTERRUPTED
    except Exception as e:
        error_info = error_handler.handle_error(e, context=args.command)
        error_handler.display_error(error_info)
        return error_info.exit_code
    else:
        logger.info("コマンド完了: %s", args.command)
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
