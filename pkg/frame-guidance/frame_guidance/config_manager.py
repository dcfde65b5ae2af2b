"""
設定管理モジュール

実行設定ファイル (YAML / JSON) の読み込み、環境変数展開、スキーマ検証、
相対パスの解決、タスクプリセットの適用を行う。
優先順位はコマンドラインフラグ > 設定ファイル > 既定値。
"""

import copy
import json
import logging
import os
import re
from difflib import get_close_matches
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Mapping, Optional, Set, Tuple, Union

import yaml

from .base_backend import ConfigError
from .vlo import BACKEND_DEFAULTS, GuidanceConfig

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.json"

TASKS = ("keyframe", "style", "loop", "encoded", "masked", "composite", "sdedit")
ANALYSES = ("locality", "cost", "layout", "gradprop", "shortcut", "vlo-ablation", "slicing", "coefficients")

# タスクごとのガイダンス既定値 (設定ファイルの guidance セクションが優先)
TASK_PRESETS: Dict[str, Dict[str, Any]] = {
    "keyframe": {},
    "style": {"M": 5},
    "loop": {"layout_eta_scale": 0.5},
    "encoded": {},
    "masked": {},
    "composite": {},
    "sdedit": {},
}

# タスクの条件が省略されたときの既定
TASK_DEFAULT_CONDITIONS: Dict[str, list] = {
    "loop": [{"kind": "loop"}],
}

# タスクが受け付ける条件の種類 (None は制限なし。composite の子も数える)
TASK_CONDITION_KINDS: Dict[str, Optional[FrozenSet[str]]] = {
    "keyframe": frozenset({"keyframe"}),
    "style": frozenset({"style"}),
    "loop": frozenset({"loop"}),
    "encoded": frozenset({"encoded"}),
    "masked": frozenset({"masked"}),
    "composite": None,
    "sdedit": None,
}

_INT = (int,)
_FLOAT = (int, float)
_STR = (str,)
_BOOL = (bool,)
_LIST = (list,)
_MAP = (dict,)

# セクション → キー → 許可される型
CONFIG_SCHEMA: Dict[str, Dict[str, Tuple[type, ...]]] = {
    "run": {"seed": _INT, "out": _STR, "dtype": _STR, "fps": _INT},
    "dataset": {"clips": _INT, "frames": _INT, "height": _INT, "width": _INT, "channels": _INT, "dir": _STR},
    "model": {
        "backend": _STR,
        "steps": _INT,
        "vae": _STR,
        "denoiser": _STR,
        "vae_architecture": _MAP,
        "denoiser_architecture": _MAP,
    },
    "train": {
        "vae_epochs": _INT,
        "denoiser_epochs": _INT,
        "vae_lr": _FLOAT,
        "denoiser_lr": _FLOAT,
        "batch_size": _INT,
        "holdout_fraction": _FLOAT,
        "resume": _BOOL,
        "max_holdout_mse": _FLOAT,
    },
    "guidance": {
        "eta": _FLOAT,
        "M": _INT,
        "t_L": _INT,
        "t_D": _INT,
        "layout_steps": _INT,
        "detail_steps": _INT,
        "normalize_grad": _BOOL,
        "M_schedule": _STR,
        "decay_span": _INT,
        "update_rule": _STR,
        "mode": _STR,
        "layout_eta_scale": _FLOAT,
        "window": _INT,
        "downsample": _INT,
    },
    "task": {"name": _STR, "conditions": _LIST, "source": _MAP, "t_start": _INT},
    "analysis": {
        "seeds": _LIST,
        "seed_count": _INT,
        "clips": _INT,
        "t_probe": _LIST,
        "frames": _LIST,
        "factor": _INT,
        "windows": _LIST,
        "pool": _INT,
        "scale": _INT,
        "coefficient_steps": _INT,
    },
}

CONDITION_KEYS = frozenset(
    {"kind", "frames", "weight", "target", "targets", "style", "num_guided", "encoder", "mask", "children"}
)

# 設定ファイルの位置を基準に解決するパス
PATH_KEYS = (("run", "out"), ("dataset", "dir"), ("model", "vae"), ("model", "denoiser"))

DEFAULT_CONFIG: Dict[str, Dict[str, Any]] = {
    "run": {"seed": 0, "out": "runs/latest", "dtype": "float32", "fps": 8},
    "dataset": {"clips": 64, "frames": 17, "height": 32, "width": 32, "channels": 3, "dir": "data/clips"},
    "model": {
        "backend": "diffusion",
        "steps": 50,
        "vae": "checkpoints/vae",
        "denoiser": "checkpoints/denoiser",
        "vae_architecture": {},
        "denoiser_architecture": {},
    },
    "train": {
        "vae_epochs": 40,
        "denoiser_epochs": 60,
        "vae_lr": 2e-3,
        "denoiser_lr": 1e-3,
        "batch_size": 8,
        "holdout_fraction": 0.125,
        "resume": False,
        "max_holdout_mse": 0.01,
    },
    "guidance": {"window": 3, "downsample": 1},
    "task": {"name": "keyframe", "conditions": [], "t_start": 30},
    "analysis": {
        "seed_count": 20,
        "clips": 4,
        "t_probe": [50, 25, 1],
        "frames": [8],
        "factor": 2,
        "windows": [1, 2, 3, 4],
        "pool": 4,
        "scale": 8,
        "coefficient_steps": 3,
    },
}

_ENV_PATTERN = re.compile(r"\${([^}:]+)(?::([^}]*))?}")


def _type_names(types: Tuple[type, ...]) -> str:
    return "/".join(t.__name__ for t in types)


def _check_keys(found: Mapping[str, Any], allowed: Any, where: str) -> None:
    for key in found:
        if key not in allowed:
            suggest = get_close_matches(str(key), list(allowed), n=3, cutoff=0.6)
            hint = f" (候補: {', '.join(suggest)})" if suggest else ""
            raise ConfigError(f"未知の設定キー: {where}{key}{hint}")


class ConfigManager:
    """
    実行設定の管理クラス

    Features:
        - YAML / JSON 設定ファイルの読み込み
        - ${VAR} / ${VAR:default} 形式の環境変数展開
        - 未知キーを拒否するスキーマ検証 (difflib による候補表示)
        - 設定ファイル基準の相対パス解決
        - タスクプリセットとフラグ上書き

    Example:
        >>> manager = ConfigManager()
        >>> manager.load_config("config.yml")
        >>> manager.apply_overrides(seed=3)
        >>> cfg = manager.guidance_config("keyframe")
    """

    def __init__(self):
        """既定値で初期化"""
        self.config: Dict[str, Dict[str, Any]] = copy.deepcopy(DEFAULT_CONFIG)
        self._config_path: Optional[Path] = None
        self.base_dir: Path = Path.cwd()

    def load_config(self, config_path: Union[str, Path]) -> Dict[str, Any]:
        """
        設定ファイルを読み込み、既定値に重ねる

        Args:
            config_path: 設定ファイルのパス

        Returns:
            既定値とマージされた設定

        Raises:
            ConfigError: 読み込み・解析・検証に失敗した場合
        """
        config_file = Path(config_path)
        if not config_file.exists():
            raise ConfigError(f"設定ファイルが見つかりません: {config_file}")

        try:
            with open(config_file, "r", encoding="utf-8") as f:
                raw_config = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"YAML解析エラー: {e}") from e
        except OSError as e:
            raise ConfigError(f"設定ファイル読み込みエラー: {e}") from e

        if raw_config is None:
            raw_config = {}
        elif not isinstance(raw_config, dict):
            raise ConfigError("設定ファイルのルートは辞書である必要があります")

        raw_config = self._expand_environment_variables(raw_config)
        self.validate_config(raw_config)

        self._config_path = config_file.resolve()
        self.base_dir = self._config_path.parent
        for section, values in raw_config.items():
            self.config[section].update(values or {})
        self.validate_config(self.config)
        logger.info("設定ファイルを読み込みました: %s", config_file)
        return self.config

    def apply_overrides(self, seed: Optional[int] = None, out: Optional[Union[str, Path]] = None) -> None:
        """コマンドラインフラグで上書き (None は未指定)"""
        if seed is not None:
            self.config["run"]["seed"] = int(seed)
        if out is not None:
            self.config["run"]["out"] = str(Path(out).resolve())

    def validate_config(self, config: Mapping[str, Any]) -> None:
        """
        スキーマ検証 (未知キー、型、値域)

        Raises:
            ConfigError: 検証に失敗した場合
        """
        _check_keys(config, CONFIG_SCHEMA, "")
        for section, values in config.items():
            if values is None:
                continue
            if not isinstance(values, dict):
                raise ConfigError(f"セクション {section} は辞書である必要があります")
            schema = CONFIG_SCHEMA[section]
            _check_keys(values, schema, f"{section}.")
            for key, value in values.items():
                types = schema[key]
                if (isinstance(value, bool) and bool not in types) or not isinstance(value, types):
                    raise ConfigError(
                        f"{section}.{key} の型が不正です: {type(value).__name__} ({_type_names(types)} が必要)"
                    )
        self._check_ranges(config)
        for entry in (config.get("task") or {}).get("conditions", []):
            self._check_condition(entry)

    def _check_ranges(self, config: Mapping[str, Any]) -> None:
        positive = {
            "run": ("fps",),
            "dataset": ("clips", "frames", "height", "width"),
            "model": ("steps",),
            "train": ("batch_size",),
            "guidance": ("M", "decay_span", "window", "downsample"),
            "analysis": ("seed_count", "clips", "factor", "pool", "scale", "coefficient_steps"),
        }
        for section, keys in positive.items():
            for key in keys:
                value = (config.get(section) or {}).get(key)
                if value is not None and value < 1:
                    raise ConfigError(f"{section}.{key} は 1 以上である必要があります: {value}")
        for key in ("vae_epochs", "denoiser_epochs"):
            value = (config.get("train") or {}).get(key)
            if value is not None and value < 0:
                raise ConfigError(f"train.{key} は 0 以上である必要があります: {value}")
        run = config.get("run") or {}
        if run.get("dtype", "float32") not in ("float32", "float64"):
            raise ConfigError(f"run.dtype は float32 または float64 です: {run['dtype']}")
        channels = (config.get("dataset") or {}).get("channels")
        if channels is not None and channels not in (1, 3):
            raise ConfigError(f"dataset.channels は 1 または 3 です: {channels}")
        backend = (config.get("model") or {}).get("backend")
        if backend is not None and backend not in BACKEND_DEFAULTS:
            suggest = get_close_matches(backend, list(BACKEND_DEFAULTS), n=3, cutoff=0.6)
            hint = f" (候補: {', '.join(suggest)})" if suggest else ""
            raise ConfigError(f"未知のバックエンド: {backend}{hint}")
        task = (config.get("task") or {}).get("name")
        if task is not None and task not in TASKS:
            raise ConfigError(f"未知のタスク: {task} (選択肢: {', '.join(TASKS)})")
        fraction = (config.get("train") or {}).get("holdout_fraction")
        if fraction is not None and not 0 <= fraction < 1:
            raise ConfigError(f"train.holdout_fraction は [0, 1) の範囲です: {fraction}")

    def _check_condition(self, entry: Any) -> None:
        if not isinstance(entry, dict):
            raise ConfigError(f"条件は辞書である必要があります: {entry!r}")
        _check_keys(entry, CONDITION_KEYS, "task.conditions[].")
        if "kind" not in entry:
            raise ConfigError(f"条件に kind がありません: {entry}")
        for child in entry.get("children", []):
            self._check_condition(child)

    def _expand_environment_variables(self, config: Any) -> Any:
        """設定内の ${VAR} / ${VAR:default} を再帰的に展開する"""
        if isinstance(config, dict):
            return {key: self._expand_environment_variables(value) for key, value in config.items()}
        if isinstance(config, list):
            return [self._expand_environment_variables(item) for item in config]
        if isinstance(config, str):
            def repl(m: re.Match) -> str:
                default = m.group(2)
                return os.environ.get(m.group(1), default if default is not None else m.group(0))
            return _ENV_PATTERN.sub(repl, config)
        return config

    def path(self, section: str, key: str) -> Path:
        """設定ファイル基準で解決したパス"""
        value = Path(self.config[section][key])
        return value if value.is_absolute() else self.base_dir / value

    @property
    def run_dir(self) -> Path:
        return self.path("run", "out")

    @property
    def seed(self) -> int:
        return int(self.config["run"]["seed"])

    def task_name(self, task: Optional[str] = None) -> str:
        name = task or self.config["task"]["name"]
        if name not in TASKS:
            raise ConfigError(f"未知のタスク: {name} (選択肢: {', '.join(TASKS)})")
        return name

    def conditions(self, task: Optional[str] = None) -> list:
        """
        タスクの条件指定

        task.conditions は task.name のタスク用。別のタスクを指定し、そのタスクに既定の条件があれば既定を使う。
        条件の種類とフレーム番号はモデルを読み込む前にここで検証する。

        Args:
            task: タスク名 (省略時は task.name)

        Returns:
            条件エントリのリスト

        Raises:
            ConfigError: 条件が空、タスクと条件の種類が合わない、フレーム番号が範囲外の場合
        """
        name = self.task_name(task)
        entries = self.config["task"].get("conditions") or []
        if not entries or (name != self.config["task"]["name"] and name in TASK_DEFAULT_CONDITIONS):
            entries = TASK_DEFAULT_CONDITIONS.get(name, [])
        if not entries:
            raise ConfigError(f"タスク {name} の task.conditions が空です")
        self._check_task_conditions(name, entries)
        return entries

    def _check_task_conditions(self, name: str, entries: List[Mapping[str, Any]]) -> None:
        kinds: Set[str] = set()
        num_frames = int(self.config["dataset"]["frames"])

        def visit(entry: Mapping[str, Any]) -> None:
            kind = str(entry.get("kind", "")).strip().lower()
            kinds.add(kind)
            frames = entry.get("frames")
            if isinstance(frames, list):
                bad = [f for f in frames if not isinstance(f, int) or not 0 <= f < num_frames]
                if bad:
                    raise ConfigError(f"{kind} 条件のフレーム番号が範囲外です: {bad} (F={num_frames})")
            for child in entry.get("children", []):
                visit(child)

        for entry in entries:
            visit(entry)
        allowed = TASK_CONDITION_KINDS[name]
        if allowed is not None and not kinds <= allowed:
            raise ConfigError(
                f"タスク {name} では {', '.join(sorted(kinds - allowed))} 条件は使えません (許可: {', '.join(sorted(allowed))})"
            )
        if name == "composite" and "composite" not in kinds and len(kinds) < 2:
            raise ConfigError("composite タスクには 2 種類以上の条件か composite 条件が必要です")

    def guidance_config(self, task: Optional[str] = None) -> GuidanceConfig:
        """
        プリセット → 設定ファイルの順に重ねた GuidanceConfig

        Args:
            task: タスク名 (省略時は task.name)

        Returns:
            検証済みの GuidanceConfig
        """
        name = self.task_name(task)
        params = dict(TASK_PRESETS[name])
        params.update({k: v for k, v in self.config["guidance"].items() if k not in ("window", "downsample")})
        model = self.config["model"]
        try:
            cfg = GuidanceConfig.for_backend(model["backend"], model["steps"], **params)
        except TypeError as e:
            raise ConfigError(f"guidance 設定が不正です: {e}") from e
        return cfg.validate(model["steps"])

    def write_resolved(self, run_dir: Optional[Path] = None) -> Path:
        """解決済みの設定を実行ディレクトリに保存"""
        out = Path(run_dir or self.run_dir)
        out.mkdir(parents=True, exist_ok=True)
        resolved = copy.deepcopy(self.config)
        for section, key in PATH_KEYS:
            resolved[section][key] = str(self.path(section, key))
        resolved["config_path"] = str(self._config_path) if self._config_path else None
        path = out / RESOLVED_CONFIG_NAME
        path.write_text(json.dumps(resolved, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8")
        return path

    def __str__(self) -> str:
        return (
            f"ConfigManager(backend={self.config['model']['backend']}, "
            f"seed={self.seed}, config_path={self._config_path})"
        )
