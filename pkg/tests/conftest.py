"""
pytest設定ファイルと共通フィクスチャ

テスト実行時の設定とテスト間で共有するフィクスチャを定義。
モデルは CPU で数秒以内に動く極小サイズ (16x16, F=9, 64bit) を使う。
"""

import os
import sys
from pathlib import Path
from typing import Any, Dict

import pytest
import torch
import yaml
from torch import nn

sys.path.insert(0, str(Path(__file__).parent.parent / "frame-guidance"))

from frame_guidance.backend_factory import BackendFactory  # noqa: E402
from frame_guidance.models import CausalVAE, ModelBundle, VelocityDenoiser  # noqa: E402
from frame_guidance.schedules import NoiseSchedule  # noqa: E402

# テスト用の極小アーキテクチャ
TINY_FRAMES = 9
TINY_SIZE = 16
TINY_VAE: Dict[str, Any] = {
    "channels": 3,
    "latent_channels": 2,
    "temporal_rate": 4,
    "spatial_factor": 2,
    "receptive_field": 3,
    "hidden": 8,
    "seed": 0,
}
TINY_DENOISER: Dict[str, Any] = {"latent_channels": 2, "hidden": 8, "heads": 2, "embed_dim": 8, "seed": 0}


class GaussianOracle(nn.Module):
    """
    データ z_0 ~ N(μ, s²) (要素ごとに独立) に対する厳密な事後平均速度

    diffusion: v* = a·E[ε|z_t] − b·E[z_0|z_t]  (a = √ᾱ_t, b = √(1−ᾱ_t))
    flow:      v* = E[ε|z_t] − E[z_0|z_t]      (a = 1−σ_t, b = σ_t)
    """

    def __init__(self, schedule: NoiseSchedule, mu: float, s: float):
        super().__init__()
        self.schedule = schedule
        self.mu = mu
        self.s = s

    def coefficients(self, t: int):
        if self.schedule.kind == "diffusion":
            a_bar = self.schedule.alpha_bar_at(t)
            return a_bar ** 0.5, (1.0 - a_bar) ** 0.5
        sigma = self.schedule.sigma_at(t)
        return 1.0 - sigma, sigma

    def posterior(self, z: torch.Tensor, t: int):
        a, b = self.coefficients(t)
        var = a * a * self.s * self.s + b * b
        centred = z - a * self.mu
        z0 = self.mu + a * self.s * self.s * centred / var
        eps = b * centred / var
        return z0, eps

    def forward(self, z: torch.Tensor, t: int) -> torch.Tensor:
        z0, eps = self.posterior(z, int(t))
        if self.schedule.kind == "diffusion":
            a, b = self.coefficients(int(t))
            return a * eps - b * z0
        return eps - z0


def make_bundle(backend: str = "diffusion", steps: int = 10, dtype: torch.dtype = torch.float64) -> ModelBundle:
    """未学習の極小モデル一式"""
    schedule_backend = BackendFactory().create_backend({"backend": backend, "steps": steps})
    vae = CausalVAE(**TINY_VAE).to(dtype)
    denoiser = VelocityDenoiser(**TINY_DENOISER, backend=backend, max_steps=steps).to(dtype)
    return ModelBundle(vae=vae, denoiser=denoiser, backend=schedule_backend).freeze()


def random_video(seed: int, frames: int = TINY_FRAMES, size: int = TINY_SIZE, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.rand((frames, size, size, 3), generator=generator, dtype=dtype)


@pytest.fixture
def tiny_bundle():
    """diffusion バックエンドの極小モデル (T=10)"""
    return make_bundle("diffusion", 10)


@pytest.fixture
def tiny_flow_bundle():
    """flow バックエンドの極小モデル (T=10)"""
    return make_bundle("flow", 10)


@pytest.fixture
def gaussian_oracle():
    return GaussianOracle


@pytest.fixture
def video_factory():
    return random_video


@pytest.fixture
def tiny_config(tmp_path: Path) -> Path:
    """極小サイズの実行設定ファイル"""
    config = {
        "run": {"seed": 1, "out": "runs/test", "dtype": "float64"},
        "dataset": {"clips": 4, "frames": TINY_FRAMES, "height": TINY_SIZE, "width": TINY_SIZE, "dir": "data"},
        "model": {
            "backend": "diffusion",
            "steps": 6,
            "vae": "ckpt/vae",
            "denoiser": "ckpt/denoiser",
            "vae_architecture": {k: v for k, v in TINY_VAE.items() if k not in ("channels", "seed")},
            "denoiser_architecture": {k: v for k, v in TINY_DENOISER.items() if k not in ("latent_channels", "seed")},
        },
        "train": {"vae_epochs": 1, "denoiser_epochs": 1, "batch_size": 2, "holdout_fraction": 0.25},
        "guidance": {"M": 2, "layout_steps": 2, "detail_steps": 2, "decay_span": 2},
        "task": {
            "name": "keyframe",
            "conditions": [
                {
                    "kind": "keyframe",
                    "frames": [4],
                    "target": {"video": "data/clip_0000", "frame": 4, "color_block": {"box": [2, 2, 8, 8], "color": [0.9, 0.1, 0.1]}},
                }
            ],
            "t_start": 3,
        },
        "analysis": {"seeds": [0, 1], "clips": 2, "t_probe": [6, 1], "frames": [4], "windows": [1, 2, 3], "scale": 2},
    }
    path = tmp_path / "config.yml"
    path.write_text(yaml.safe_dump(config), encoding="utf-8")
    return path


@pytest.fixture
def clean_environment():
    """テスト用にクリーンな環境変数を提供"""
    original_env = {}
    test_env_vars = ["FRAME_GUIDANCE_RUNS", "FRAME_GUIDANCE_TEST_DIR"]

    for var in test_env_vars:
        if var in os.environ:
            original_env[var] = os.environ[var]
            del os.environ[var]

    yield

    for var in test_env_vars:
        os.environ.pop(var, None)
    for var, value in original_env.items():
        os.environ[var] = value


# pytest設定
def pytest_configure(config):
    """pytest設定"""
    config.addinivalue_line("markers", "unit: mark test as unit test")
    config.addinivalue_line("markers", "integration: mark test as integration test")
    config.addinivalue_line("markers", "performance: mark test as performance test")
    config.addinivalue_line("markers", "slow: mark test as slow running")


def pytest_collection_modifyitems(config, items):
    """テスト収集後の処理"""
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="--run-slow を指定すると実行されます")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def pytest_addoption(parser):
    """コマンドラインオプションを追加"""
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run slow tests"
    )
