"""
トイビデオモデルのユニットテスト

因果的 VAE の構造的性質 (因果性・受容野)、デノイザーの大域的混合、決定性を検証。
"""

import pytest
import torch

from frame_guidance.base_backend import CheckpointError, ShapeError
from frame_guidance.models import (
    CausalVAE,
    ModelBundle,
    VelocityDenoiser,
    build_model,
    frames_for_latents,
    latent_count,
)

from conftest import TINY_DENOISER, TINY_VAE

pytestmark = pytest.mark.unit


@pytest.fixture
def vae():
    return CausalVAE(**TINY_VAE).double().eval()


@pytest.fixture
def denoiser():
    return VelocityDenoiser(**TINY_DENOISER).double().eval()


class TestLatentCount:
    @pytest.mark.parametrize("frames,expected", [(1, 1), (5, 2), (9, 3), (17, 5), (49, 13)])
    def test_latent_count(self, frames, expected):
        assert latent_count(frames, 4) == expected

    def test_frames_for_latents(self):
        assert frames_for_latents(13, 4) == 49

    def test_rejects_empty(self):
        with pytest.raises(ShapeError):
            latent_count(0, 4)


class TestCausalVAE:
    """因果的 VAE"""

    def test_shapes(self, vae, video_factory):
        x = video_factory(0)
        z = vae.encode(x)
        assert z.shape == (3, 8, 8, 2)
        assert vae.decode(z).shape == (9, 16, 16, 3)
        assert vae.decode(z, 9).shape == x.shape

    def test_decode_frame_count_mismatch(self, vae):
        with pytest.raises(ShapeError):
            vae.decode(torch.zeros(3, 8, 8, 2, dtype=torch.float64), 13)

    def test_single_frame(self, vae, video_factory):
        x = video_factory(0, frames=1)
        assert vae.encode(x).shape[0] == 1
        assert vae.decode(vae.encode(x), 1).shape == x.shape

    @pytest.mark.parametrize("bad", [(9, 16, 16, 1), (9, 15, 16, 3), (16, 16, 3)])
    def test_rejects_bad_video(self, vae, bad):
        with pytest.raises(ShapeError):
            vae.encode(torch.zeros(bad, dtype=torch.float64))

    def test_future_latents_do_not_affect_block(self, vae):
        """潜在 j+k (k ≥ 1) を変えても潜在 j のブロックは完全に一致する"""
        z = torch.randn(5, 8, 8, 2, dtype=torch.float64)
        perturbed = z.clone()
        perturbed[3:] = 0.0
        with torch.no_grad():
            for j in range(3):
                assert torch.equal(vae.decode_block(z, j), vae.decode_block(perturbed, j))

    def test_distant_past_does_not_affect_block(self, vae):
        """潜在 j−k (k ≥ R) を変えても潜在 j のブロックは完全に一致する"""
        z = torch.randn(5, 8, 8, 2, dtype=torch.float64)
        perturbed = z.clone()
        perturbed[:2] = torch.randn(2, 8, 8, 2, dtype=torch.float64)
        with torch.no_grad():
            assert torch.equal(vae.decode_block(z, 4), vae.decode_block(perturbed, 4))
            assert not torch.equal(vae.decode_block(z, 3), vae.decode_block(perturbed, 3))

    def test_encoder_groups_are_independent(self, vae, video_factory):
        x = video_factory(1)
        blacked = x.clone()
        blacked[6] = 0.0
        with torch.no_grad():
            base, changed = vae.encode(x), vae.encode(blacked)
        assert torch.equal(base[0], changed[0])
        assert torch.equal(base[1], changed[1])
        assert not torch.equal(base[2], changed[2])

    def test_forward_matches_decode(self, vae, video_factory):
        x = video_factory(2)
        with torch.no_grad():
            batched = vae(x.unsqueeze(0))[0]
            unbatched = vae.decode(vae.encode(x), x.shape[0])
        assert torch.allclose(batched, unbatched, atol=1e-10)

    def test_decode_vjp_matches_finite_differences(self, vae):
        """5 潜在のランダムプローブで VJP が中心差分と一致 (相対誤差 < 1e-4)"""
        generator = torch.Generator().manual_seed(0)
        z = torch.randn((5, 8, 8, 2), generator=generator, dtype=torch.float64)
        probe = torch.randn((17, 16, 16, 3), generator=generator, dtype=torch.float64)
        direction = torch.randn(z.shape, generator=generator, dtype=torch.float64)

        z_req = z.clone().requires_grad_(True)
        (vjp,) = torch.autograd.grad(torch.sum(vae.decode(z_req) * probe), z_req)
        analytic = torch.sum(vjp * direction).item()

        h = 1e-6
        with torch.no_grad():
            plus = torch.sum(vae.decode(z + h * direction) * probe).item()
            minus = torch.sum(vae.decode(z - h * direction) * probe).item()
        numeric = (plus - minus) / (2 * h)
        assert abs(analytic - numeric) / max(abs(numeric), 1e-12) < 1e-4

    def test_seeded_initialisation(self):
        first = CausalVAE(**TINY_VAE)
        second = CausalVAE(**TINY_VAE)
        for a, b in zip(first.state_dict().values(), second.state_dict().values()):
            assert torch.equal(a, b)

    def test_initialisation_keeps_global_rng(self):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        CausalVAE(**TINY_VAE)
        assert torch.equal(torch.rand(3), expected)

    def test_rejects_non_power_of_two(self):
        with pytest.raises(ShapeError):
            CausalVAE(spatial_factor=3)


class TestVelocityDenoiser:
    """速度予測デノイザー"""

    def test_shapes(self, denoiser):
        z = torch.randn(3, 8, 8, 2, dtype=torch.float64)
        assert denoiser(z, 5).shape == z.shape
        batch = torch.randn(2, 3, 8, 8, 2, dtype=torch.float64)
        assert denoiser(batch, torch.tensor([1.0, 4.0], dtype=torch.float64)).shape == batch.shape

    def test_rejects_bad_latent(self, denoiser):
        with pytest.raises(ShapeError):
            denoiser(torch.zeros(3, 8, 8, 5, dtype=torch.float64), 1)

    def test_heads_must_divide_hidden(self):
        with pytest.raises(ShapeError):
            VelocityDenoiser(hidden=10, heads=4)

    def test_deterministic(self, denoiser):
        z = torch.randn(3, 8, 8, 2, dtype=torch.float64)
        assert torch.equal(denoiser(z, 3), denoiser(z, 3))

    def test_global_mixing(self, denoiser):
        """出力のどの潜在 j も入力のすべての潜在 k に依存する"""
        generator = torch.Generator().manual_seed(1)
        z = torch.randn((4, 8, 8, 2), generator=generator, dtype=torch.float64).requires_grad_(True)
        out = denoiser(z, 7)
        for j in range(4):
            probe = torch.randn(out[j].shape, generator=generator, dtype=torch.float64)
            (grad,) = torch.autograd.grad(torch.sum(out[j] * probe), z, retain_graph=True)
            norms = torch.linalg.vector_norm(grad.flatten(1), dim=1)
            assert bool((norms >= 1e-12).all()), f"潜在 {j} の出力が一部の入力に依存していません: {norms}"


class TestBuildModel:
    def test_build_known_kinds(self):
        assert isinstance(build_model("causal_vae", TINY_VAE), CausalVAE)
        assert isinstance(build_model("denoiser", TINY_DENOISER), VelocityDenoiser)

    def test_unknown_kind(self):
        with pytest.raises(CheckpointError):
            build_model("unet", {})

    def test_architecture_round_trip(self):
        vae = CausalVAE(**TINY_VAE)
        assert build_model(vae.kind, vae.architecture()).architecture() == vae.architecture()


class TestModelBundle:
    def test_freeze(self, tiny_bundle):
        assert all(not p.requires_grad for p in tiny_bundle.vae.parameters())
        assert all(not p.requires_grad for p in tiny_bundle.denoiser.parameters())
        assert tiny_bundle.dtype == torch.float64

    def test_velocity_is_denoiser(self, tiny_bundle):
        z = torch.randn(3, 8, 8, 2, dtype=torch.float64)
        assert torch.equal(tiny_bundle.velocity(z, 2), tiny_bundle.denoiser(z, 2))
