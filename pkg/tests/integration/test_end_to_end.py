"""
エンドツーエンド統合テスト

極小設定で dataset → train → generate → analyze を CLI から通しで実行する。
"""

import json

import numpy as np
import pytest
import yaml

from frame_guidance.config_manager import ANALYSES
from frame_guidance.main import main
from frame_guidance.video_io import read_video

pytestmark = pytest.mark.integration


@pytest.fixture
def trained_config(tiny_config):
    """データセット生成と 2 モデルの学習まで済ませた設定"""
    config = str(tiny_config)
    assert main(["--config", config, "dataset"]) == 0
    assert main(["--config", config, "train", "vae"]) == 0
    assert main(["--config", config, "train", "denoiser"]) == 0
    return tiny_config


def _run_dir(config_path):
    return config_path.parent / "runs" / "test"


class TestEndToEnd:
    """エンドツーエンドテストクラス"""

    def test_training_outputs(self, trained_config):
        root = trained_config.parent
        for name in ("vae", "denoiser"):
            manifest = json.loads((root / "ckpt" / f"{name}.json").read_text())
            assert manifest["epochs_completed"] == 1
            assert manifest["seed"] == 1
            assert (root / "ckpt" / f"{name}.bin").exists()
            metrics = json.loads((_run_dir(trained_config) / f"train_{name}_metrics.json").read_text())
            assert len(metrics["loss"]) == 1

    def test_resume_training(self, trained_config):
        data = yaml.safe_load(trained_config.read_text())
        data["train"]["resume"] = True
        trained_config.write_text(yaml.safe_dump(data))
        assert main(["--config", str(trained_config), "train", "vae"]) == 0
        manifest = json.loads((trained_config.parent / "ckpt" / "vae.json").read_text())
        assert manifest["epochs_completed"] == 2

    def test_generate_keyframe_with_baseline(self, trained_config):
        assert main(["--config", str(trained_config), "generate", "keyframe", "--baseline"]) == 0
        run_dir = _run_dir(trained_config)
        video, manifest = read_video(run_dir / "video")
        baseline, _ = read_video(run_dir / "baseline")
        assert video.shape == baseline.shape == (9, 16, 16, 3)
        assert manifest["provenance"]["task"] == "keyframe"
        trace = json.loads((run_dir / "trace.json").read_text())
        assert trace["trace"]["records"]
        assert {row["stage"] for row in trace["plan"]} == {"layout", "detail", "free"}

    def test_guidance_off_matches_baseline(self, trained_config, tmp_path):
        config = str(trained_config)
        assert main(["--config", config, "--out", str(tmp_path / "off"), "generate", "keyframe", "--guidance-off"]) == 0
        assert main(["--config", config, "--out", str(tmp_path / "ref"), "generate", "keyframe", "--baseline"]) == 0
        off, _ = read_video(tmp_path / "off" / "video")
        reference, _ = read_video(tmp_path / "ref" / "baseline")
        assert np.array_equal(off.numpy(), reference.numpy())

    def test_generate_sdedit(self, trained_config):
        data = yaml.safe_load(trained_config.read_text())
        data["task"]["source"] = {"video": "data/clip_0001"}
        trained_config.write_text(yaml.safe_dump(data))
        assert main(["--config", str(trained_config), "generate", "sdedit"]) == 0
        assert (_run_dir(trained_config) / "video" / "manifest.json").exists()

    def test_generate_loop_default_conditions(self, trained_config):
        data = yaml.safe_load(trained_config.read_text())
        data["task"]["conditions"] = []
        trained_config.write_text(yaml.safe_dump(data))
        assert main(["--config", str(trained_config), "generate", "loop"]) == 0

    @pytest.mark.parametrize("which", ANALYSES)
    def test_analyses(self, trained_config, which):
        assert main(["--config", str(trained_config), "analyze", which]) == 0
        bundle = _run_dir(trained_config) / "analysis" / which
        manifest = json.loads((bundle / "figures.json").read_text())
        assert manifest["sections"]
        for section in manifest["sections"].values():
            assert (bundle / section["json"]).exists()
            if "image" in section:
                assert (bundle / section["image"]).exists()

    def test_locality_rows_follow_frame_groups(self, trained_config):
        assert main(["--config", str(trained_config), "analyze", "locality"]) == 0
        rows = json.loads((_run_dir(trained_config) / "analysis" / "locality" / "locality_rows.json").read_text())
        assert all(row["argmax"] == row["expected"] for row in rows)
        assert all(row["contiguous"] for row in rows)

    def test_non_finite_eta_rejected(self, trained_config):
        data = yaml.safe_load(trained_config.read_text())
        data["guidance"]["eta"] = float("inf")
        trained_config.write_text(yaml.safe_dump(data))
        assert main(["--config", str(trained_config), "generate", "keyframe"]) == 1

