"""
ビデオコンテナ入出力のユニットテスト
"""

import json

import numpy as np
import pytest
import torch
from PIL import Image

from frame_guidance.base_backend import ShapeError, VideoFormatError
from frame_guidance.video_io import (
    FRAME_PATTERN,
    MANIFEST_NAME,
    read_image,
    read_manifest,
    read_mask,
    read_video,
    to_uint8,
    write_png,
    write_video,
)

pytestmark = pytest.mark.unit


class TestVideoContainer:
    """PPM フレーム + manifest.json のコンテナ"""

    def test_write_and_read(self, tmp_path, video_factory):
        video = video_factory(0).float()
        write_video(tmp_path / "clip", video, fps=12, seed=3, provenance={"source": "test"})
        loaded, manifest = read_video(tmp_path / "clip")

        assert loaded.shape == video.shape
        assert torch.max(torch.abs(loaded - video)).item() <= 0.5 / 255.0 + 1e-6
        assert manifest["fps"] == 12
        assert manifest["seed"] == 3
        assert manifest["provenance"] == {"source": "test"}

    def test_frame_files(self, tmp_path, video_factory):
        write_video(tmp_path, video_factory(0, frames=2))
        with Image.open(tmp_path / FRAME_PATTERN.format(0)) as image:
            assert image.format == "PPM"
            assert image.mode == "RGB"
        assert not (tmp_path / FRAME_PATTERN.format(2)).exists()

    def test_single_channel_round_trip(self, tmp_path):
        video = torch.linspace(0, 1, 9 * 16 * 16).reshape(9, 16, 16, 1)
        write_video(tmp_path, video)
        loaded, manifest = read_video(tmp_path)
        assert manifest["channels"] == 1
        assert loaded.shape == (9, 16, 16, 1)

    def test_rejects_bad_shape(self, tmp_path):
        with pytest.raises(ShapeError):
            write_video(tmp_path, torch.zeros(9, 16, 16, 2))

    def test_rejects_non_finite(self, tmp_path):
        video = torch.zeros(2, 16, 16, 3)
        video[0, 0, 0, 0] = float("nan")
        with pytest.raises(VideoFormatError):
            write_video(tmp_path, video)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(VideoFormatError, match="マニフェストが見つかりません"):
            read_video(tmp_path)

    def test_extra_manifest_key(self, tmp_path, video_factory):
        write_video(tmp_path, video_factory(0, frames=2))
        manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
        manifest["codec"] = "h264"
        (tmp_path / MANIFEST_NAME).write_text(json.dumps(manifest))
        with pytest.raises(VideoFormatError, match="キー"):
            read_manifest(tmp_path)

    def test_missing_frame(self, tmp_path, video_factory):
        write_video(tmp_path, video_factory(0, frames=3))
        (tmp_path / FRAME_PATTERN.format(1)).unlink()
        with pytest.raises(VideoFormatError, match="不足"):
            read_video(tmp_path)

    def test_extra_frame(self, tmp_path, video_factory):
        write_video(tmp_path, video_factory(0, frames=3))
        Image.new("RGB", (16, 16)).save(tmp_path / FRAME_PATTERN.format(3), format="PPM")
        with pytest.raises(VideoFormatError, match="多くのフレーム"):
            read_video(tmp_path)

    def test_size_mismatch(self, tmp_path, video_factory):
        write_video(tmp_path, video_factory(0, frames=2))
        Image.new("RGB", (8, 8)).save(tmp_path / FRAME_PATTERN.format(1), format="PPM")
        with pytest.raises(VideoFormatError, match="サイズ"):
            read_video(tmp_path)


class TestImages:
    def test_to_uint8_clamps(self):
        frame = torch.tensor([[[-0.5, 0.5, 2.0]]])
        assert to_uint8(frame).tolist() == [[[0, 128, 255]]]

    def test_read_image_and_mask(self, tmp_path):
        pixels = np.zeros((4, 4), dtype=np.uint8)
        pixels[:2] = 200
        write_png(tmp_path / "mask.png", pixels)
        mask = read_mask(tmp_path / "mask.png")
        assert mask.shape == (4, 4, 1)
        assert mask[:2].sum().item() == 8
        assert mask[2:].sum().item() == 0
        assert read_image(tmp_path / "mask.png").shape == (4, 4, 3)

    def test_unreadable_image(self, tmp_path):
        (tmp_path / "broken.png").write_bytes(b"not an image")
        with pytest.raises(VideoFormatError):
            read_image(tmp_path / "broken.png")
