"""
潜在スライシングのユニットテスト

部分デコードの厳密性、空間ダウンサンプリング、エンコーダーの局所性、デコードコストをテスト。
"""

import pytest
import torch

from frame_guidance.base_backend import ConfigError, ShapeError
from frame_guidance.models import CausalVAE
from frame_guidance.slicing import (
    SliceWindow,
    decode_cost,
    frame_to_latent,
    is_contiguous,
    latent_frames,
    locality_map,
    merge_windows,
    row_support,
    slice_decode,
    spatial_downsample,
    window_reconstruction_error,
)

from conftest import TINY_VAE

pytestmark = pytest.mark.unit

CLIP_SEEDS = 20


def seeded_latents(seed: int) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.randn((5, 8, 8, 2), generator=generator, dtype=torch.float64)



@pytest.fixture
def vae():
    return CausalVAE(**TINY_VAE).double().eval()


@pytest.fixture
def latents():
    generator = torch.Generator().manual_seed(3)
    return torch.randn((5, 8, 8, 2), generator=generator, dtype=torch.float64)


class TestIndexing:
    """フレームと潜在の対応"""

    @pytest.mark.parametrize("frame,latent", [(0, 0), (1, 1), (4, 1), (5, 2), (8, 2), (48, 12)])
    def test_frame_to_latent(self, frame, latent):
        assert frame_to_latent(frame, 4) == latent

    def test_latent_frames(self):
        assert latent_frames(0, 4) == [0]
        assert latent_frames(2, 4) == [5, 6, 7, 8]
        assert latent_frames(3, 4, num_frames=11) == [9, 10]

    def test_round_trip(self):
        for i in range(49):
            assert i in latent_frames(frame_to_latent(i, 4), 4)

    def test_negative_frame(self):
        with pytest.raises(ShapeError):
            frame_to_latent(-1, 4)

    def test_window(self):
        window = SliceWindow.build(4, 3, 4, 13)
        assert window.latents == [2, 3, 4]
        assert window.frames == tuple(range(5, 17))
        assert SliceWindow.build(1, 3, 4, 13).latents == [0, 1]

    @pytest.mark.parametrize("w", [0, 14])
    def test_window_length_range(self, w):
        with pytest.raises(ConfigError):
            SliceWindow.build(4, w, 4, 13)

    def test_merge_windows(self):
        assert merge_windows([4, 5], 3) == [2, 3, 4, 5]
        assert merge_windows([1, 9], 2) == [0, 1, 8, 9]
        assert merge_windows([], 3) == []


class TestSliceDecode:
    """因果窓による部分デコード"""

    @pytest.mark.parametrize("w", [3, 4, 5])
    def test_exact_when_window_covers_receptive_field(self, vae, latents, w):
        with torch.no_grad():
            full = vae.decode(latents)
            sliced = slice_decode(vae, latents, [1, 4], w)
        assert torch.equal(sliced.frames, full[sliced.frame_indices])
        assert sliced.frame_indices == [1, 2, 3, 4, 13, 14, 15, 16]

    def test_short_window_deviates(self, vae, latents):
        errors = window_reconstruction_error(vae, latents, [1, 2, 3])
        assert errors[3] == 0.0
        assert errors[2] > 0.0

    @pytest.mark.parametrize("seed", range(CLIP_SEEDS))
    def test_exact_on_seeded_clips(self, vae, seed):
        z = seeded_latents(seed)
        L = z.shape[0]
        with torch.no_grad():
            full = vae.decode(z)
            for w in (vae.receptive_field, L):
                sliced = slice_decode(vae, z, list(range(L)), w)
                assert torch.equal(sliced.frames, full[sliced.frame_indices])

    @pytest.mark.parametrize("seed", range(CLIP_SEEDS))
    def test_error_does_not_grow_with_window(self, vae, seed):
        z = seeded_latents(seed)
        errors = window_reconstruction_error(vae, z, [2, 3, z.shape[0]])
        assert errors[2] > 0.0
        assert errors[2] >= errors[3] >= errors[z.shape[0]]
        assert errors[3] == 0.0

    def test_single_latent_window_is_worst_on_average(self, vae):
        """w=1 と w=2 の順序はクリップ単位では保証されないため平均で比較"""
        errors = [window_reconstruction_error(vae, seeded_latents(seed), [1, 2]) for seed in range(CLIP_SEEDS)]
        mean_w1 = sum(e[1] for e in errors) / CLIP_SEEDS
        mean_w2 = sum(e[2] for e in errors) / CLIP_SEEDS
        assert mean_w1 >= mean_w2 > 0.0

    def test_window_clipped_to_latent_count(self, vae, latents):
        assert slice_decode(vae, latents, [2], w=99).window == 5

    def test_truncates_last_block(self, vae):
        z = torch.randn(3, 8, 8, 2, dtype=torch.float64)
        sliced = slice_decode(vae, z, [2], num_frames=7)
        assert sliced.frame_indices == [5, 6]
        assert sliced.frames.shape[0] == 2

    def test_gradient_stays_in_window(self, vae, latents):
        z = latents.clone().requires_grad_(True)
        sliced = slice_decode(vae, z, [4], 3)
        (grad,) = torch.autograd.grad(sliced.frames.sum(), z)
        norms = torch.linalg.vector_norm(grad.flatten(1), dim=1)
        assert torch.all(norms[:2] == 0)
        assert torch.all(norms[2:] > 0)

    def test_select(self, vae, latents):
        with torch.no_grad():
            sliced = slice_decode(vae, latents, [2], 3)
        assert torch.equal(sliced.select([6]), sliced.frames[1:2])
        with pytest.raises(ShapeError, match="デコードされていません"):
            sliced.select([0])

    def test_rejects_empty_targets(self, vae, latents):
        with pytest.raises(ConfigError):
            slice_decode(vae, latents, [])


class TestSpatialDownsample:
    """デコード前の空間平均プーリング"""

    def test_average(self):
        z = torch.arange(16, dtype=torch.float64).reshape(1, 4, 4, 1)
        out = spatial_downsample(z, 2)
        assert out.shape == (1, 2, 2, 1)
        assert out[0, 0, 0, 0].item() == pytest.approx((0 + 1 + 4 + 5) / 4)

    def test_factor_one_is_identity(self):
        z = torch.randn(2, 4, 4, 3)
        assert spatial_downsample(z, 1) is z

    def test_vjp_spreads_evenly(self):
        """VJP は出力側の余接ベクトルを factor² で割って各ブロックに複製したもの"""
        z = torch.randn(2, 4, 4, 3, dtype=torch.float64, requires_grad=True)
        probe = torch.randn(2, 2, 2, 3, dtype=torch.float64)
        (grad,) = torch.autograd.grad(torch.sum(spatial_downsample(z, 2) * probe), z)
        expected = probe.repeat_interleave(2, dim=1).repeat_interleave(2, dim=2) / 4.0
        assert torch.max(torch.abs(grad - expected)).item() < 1e-6

    def test_rejects_indivisible(self):
        with pytest.raises(ShapeError):
            spatial_downsample(torch.zeros(1, 6, 6, 1), 4)


class TestLocality:
    """エンコーダーの時間的局所性"""

    def test_black_frame_changes_own_latent_only(self, vae, video_factory):
        x = video_factory(4)
        matrix = locality_map(vae, x)
        assert matrix.shape == (9, 3)
        for i in range(9):
            assert int(torch.argmax(matrix[i])) == frame_to_latent(i, 4)
            support = row_support(matrix[i])
            assert support == [frame_to_latent(i, 4)]
            assert is_contiguous(support)

    @pytest.mark.parametrize("seed", range(CLIP_SEEDS))
    def test_support_within_receptive_field(self, vae, video_factory, seed):
        matrix = locality_map(vae, video_factory(seed))
        for i in range(matrix.shape[0]):
            support = row_support(matrix[i])
            assert int(torch.argmax(matrix[i])) == frame_to_latent(i, vae.temporal_rate)
            assert 1 <= len(support) <= vae.receptive_field
            assert is_contiguous(support)

    def test_all_black_video(self, vae):
        matrix = locality_map(vae, torch.zeros(9, 16, 16, 3, dtype=torch.float64))
        assert torch.count_nonzero(matrix) == 0

    def test_is_contiguous(self):
        assert is_contiguous([2, 3, 4])
        assert is_contiguous([])
        assert not is_contiguous([1, 3])


class TestDecodeGradients:
    """デコードと空間縮小の経路に対する gradcheck (float64)"""

    @pytest.mark.parametrize("seed", range(10))
    def test_slice_decode(self, vae, seed):
        generator = torch.Generator().manual_seed(seed)
        z = torch.randn((3, 4, 4, 2), generator=generator, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda v: slice_decode(vae, v, [2], 3).frames, (z,), eps=1e-6, atol=1e-6, rtol=1e-4)

    @pytest.mark.parametrize("seed", range(10))
    def test_downsampled_slice_decode(self, vae, seed):
        generator = torch.Generator().manual_seed(seed)
        z = torch.randn((3, 4, 4, 2), generator=generator, dtype=torch.float64, requires_grad=True)

        def fn(v):
            return slice_decode(vae, spatial_downsample(v, 2), [2], 3).frames

        assert torch.autograd.gradcheck(fn, (z,), eps=1e-6, atol=1e-6, rtol=1e-4)


class TestDecodeCost:
    """デコードコストの計算"""

    @pytest.fixture
    def model(self):
        return CausalVAE(**TINY_VAE)

    def test_full_mode(self, model):
        report = decode_cost(model, "full", 49, frame_size=(32, 32))
        assert report.ratio_vs_full == 1.0
        assert report.decoded_latents == list(range(13))
        assert report.decoder_flops == report.full_flops

    def test_sliced_single_target(self, model):
        report = decode_cost(model, "sliced", 49, [12], w=3, frame_size=(32, 32))
        assert report.decoded_latents == [10, 11, 12]
        assert report.ratio_vs_full >= 13 / 3

    def test_sliced_downsampled(self, model):
        report = decode_cost(model, "sliced+downsampled", 49, [12], w=3, factor=2, frame_size=(32, 32))
        assert report.downsample_factor == 2
        assert report.ratio_vs_full >= 17.0
        assert report.decoder_flops < report.full_flops

    def test_factor_ignored_without_downsampling(self, model):
        assert decode_cost(model, "sliced", 49, [12], factor=2, frame_size=(32, 32)).downsample_factor == 1

    def test_overlapping_windows_counted_once(self, model):
        report = decode_cost(model, "sliced", 49, [5, 6], w=3, frame_size=(32, 32))
        assert report.decoded_latents == [3, 4, 5, 6]

    def test_unknown_mode(self, model):
        with pytest.raises(ConfigError, match="未知のコストモード"):
            decode_cost(model, "partial", 49, [1])

    def test_sliced_needs_targets(self, model):
        with pytest.raises(ConfigError):
            decode_cost(model, "sliced", 49)

    def test_to_dict(self, model):
        data = decode_cost(model, "full", 9, frame_size=(16, 16)).to_dict()
        assert data["mode"] == "full"
        assert data["full_elements"] == 3 * 8 * 8 * 2
