import tracemalloc

import cv2
import numpy as np
import pytest

from mbot_core.core_ot import SinkhornParams
from mbot_core.distributions import CostSpec
from mbot_core.minibatch import MinibatchConfig
from mbot_core.transfer import (
    ImageFormatError,
    PixelCloud,
    dense_barycentric_map,
    incremental_transfer,
    load_image,
    quantize,
    save_image,
)

SQ = CostSpec("sq_euclidean")


def _random_image(rng, width, height, levels=None):
    rgb = rng.random((width * height, 3))
    if levels:
        rgb = np.round(rgb * levels) / levels
    return PixelCloud(rgb, width, height)


class TestImageIO:

    def test_white_png_pixel(self, tmp_path):
        path = tmp_path / "white.png"
        save_image(PixelCloud(np.ones((1, 3)), 1, 1), path)
        cloud = load_image(path)
        assert (cloud.width, cloud.height) == (1, 1)
        np.testing.assert_array_equal(cloud.rgb, [[1.0, 1.0, 1.0]])

    def test_binary_ppm_channels(self, tmp_path):
        path = tmp_path / "two.ppm"
        path.write_bytes(b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
        cloud = load_image(path)
        assert (cloud.width, cloud.height) == (2, 1)
        np.testing.assert_array_equal(cloud.rgb, [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])

    def test_ppm_round_trip_is_exact_and_deterministic(self, tmp_path, rng):
        cloud = _random_image(rng, 7, 5, levels=255)
        first = tmp_path / "a.ppm"
        second = tmp_path / "b.ppm"
        save_image(cloud, first)
        save_image(cloud, second)
        assert first.read_bytes() == second.read_bytes()
        np.testing.assert_allclose(load_image(first).rgb, cloud.rgb, atol=1e-12)

    def test_quantize_rounds_half_up(self):
        np.testing.assert_array_equal(quantize(np.array([0.0, 0.5 / 255, 1.0])), [0, 1, 255])

    def test_unsupported_extension(self, tmp_path):
        with pytest.raises(ImageFormatError, match="Unsupported"):
            load_image(tmp_path / "photo.jpg")

    def test_garbage_bytes(self, tmp_path):
        path = tmp_path / "broken.png"
        path.write_bytes(b"definitely not a png")
        with pytest.raises(ImageFormatError):
            load_image(path)

    def test_truncated_png(self, tmp_path):
        path = tmp_path / "cut.png"
        path.write_bytes(b"\x89PNG\r\n\x1a\n\x00\x00")
        with pytest.raises(ImageFormatError, match="Could not decode"):
            load_image(path)

    def test_ascii_ppm_rejected(self, tmp_path):
        path = tmp_path / "ascii.ppm"
        path.write_bytes(b"P3\n1 1\n255\n255 0 0\n")
        with pytest.raises(ImageFormatError, match="P6"):
            load_image(path)

    def test_sixteen_bit_png_rejected(self, tmp_path):
        path = tmp_path / "deep.png"
        assert cv2.imwrite(str(path), np.full((2, 2, 3), 40000, dtype=np.uint16))
        with pytest.raises(ImageFormatError, match="8-bit"):
            load_image(path)

    def test_grayscale_png_becomes_gray_rgb(self, tmp_path):
        path = tmp_path / "gray.png"
        assert cv2.imwrite(str(path), np.array([[0, 255]], dtype=np.uint8))
        cloud = load_image(path)
        np.testing.assert_array_equal(cloud.rgb, [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImageFormatError, match="does not exist"):
            load_image(tmp_path / "absent.ppm")

    def test_channels_outside_unit_interval(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            PixelCloud(np.array([[1.5, 0.0, 0.0]]), 1, 1)


class TestIncrementalTransfer:

    def test_full_batch_matches_dense_map(self, rng):
        src = _random_image(rng, 25, 20)
        tgt = _random_image(rng, 25, 20)
        cfg = MinibatchConfig(m=500, k=1)
        dense = dense_barycentric_map(src, tgt, SQ)
        scaled = incremental_transfer(src, tgt, SQ, cfg, normalization="paper_scaling")
        per_pixel = incremental_transfer(src, tgt, SQ, cfg, normalization="per_pixel_mass")
        np.testing.assert_allclose(scaled.source_mapped.rgb, dense, atol=1e-9)
        np.testing.assert_allclose(per_pixel.source_mapped.rgb, scaled.source_mapped.rgb, atol=1e-9)

    def test_self_transfer_is_near_identity(self, rng):
        img = _random_image(rng, 10, 10, levels=255)
        mapped, _ = incremental_transfer(img, img, SQ, MinibatchConfig(m=100, k=1))
        assert np.abs(quantize(mapped.rgb).astype(int) - quantize(img.rgb).astype(int)).max() <= 1

    def test_coverage_follows_sampling_rate(self, rng):
        src = _random_image(rng, 20, 20)
        tgt = _random_image(rng, 20, 20)
        result = incremental_transfer(src, tgt, SQ, MinibatchConfig(m=20, k=30, seed=5))
        expected = 1 - (1 - 20 / 400) ** 30
        assert result.coverage["source"] == pytest.approx(expected, abs=0.06)
        assert result.coverage["target"] == pytest.approx(expected, abs=0.06)

    def test_mass_sums_to_draw_count(self, rng):
        src = _random_image(rng, 10, 6)
        tgt = _random_image(rng, 10, 6)
        result = incremental_transfer(src, tgt, SQ, MinibatchConfig(m=6, k=25))
        assert result.source_acc.mass.mean() * src.n / 25 == pytest.approx(1.0)
        assert result.target_acc.mass.sum() == pytest.approx(25.0)

    def test_unsampled_pixels_keep_their_color(self, rng):
        src = _random_image(rng, 10, 10)
        tgt = _random_image(rng, 10, 10)
        result = incremental_transfer(src, tgt, SQ, MinibatchConfig(m=5, k=2))
        untouched = result.source_acc.mass == 0
        assert untouched.any()
        np.testing.assert_array_equal(result.source_mapped.rgb[untouched], src.rgb[untouched])

    def test_worker_count_does_not_change_output(self, rng):
        src = _random_image(rng, 12, 10)
        tgt = _random_image(rng, 12, 10)
        cfg = MinibatchConfig(m=10, k=40, block_size=8)
        serial = incremental_transfer(src, tgt, SQ, cfg)
        threaded = incremental_transfer(src, tgt, SQ, cfg.with_(jobs=3))
        np.testing.assert_array_equal(serial.source_mapped.rgb, threaded.source_mapped.rgb)
        np.testing.assert_array_equal(serial.target_mapped.rgb, threaded.target_mapped.rgb)

    def test_entropic_batches(self, rng):
        src = _random_image(rng, 10, 10)
        tgt = _random_image(rng, 10, 10)
        cfg = MinibatchConfig(m=10, k=20, loss="W_eps", sinkhorn=SinkhornParams(epsilon=0.05))
        result = incremental_transfer(src, tgt, SQ, cfg)
        assert result.source_mapped.rgb.shape == (100, 3)
        assert result.source_acc.mass.sum() == pytest.approx(20.0, rel=1e-6)
        assert 0.0 <= result.source_mapped.rgb.min() and result.source_mapped.rgb.max() <= 1.0

    def test_mass_csv(self, tmp_path, rng):
        src = _random_image(rng, 4, 4)
        result = incremental_transfer(src, src, SQ, MinibatchConfig(m=4, k=3))
        path = tmp_path / "mass.csv"
        result.write_mass_csv(path, side="target")
        lines = path.read_text().splitlines()
        assert lines[0] == "pixel_index,mass"
        assert len(lines) == 17

    def test_unknown_normalization(self, rng):
        img = _random_image(rng, 2, 2)
        with pytest.raises(ValueError, match="normalization"):
            incremental_transfer(img, img, SQ, MinibatchConfig(m=2, k=1), normalization="global")

    @pytest.mark.slow
    def test_large_transfer_stays_within_memory_budget(self):
        gen = np.random.default_rng(8)
        src = _random_image(gen, 320, 320)
        tgt = _random_image(gen, 320, 320)
        n, m = src.n, 1000
        cfg = MinibatchConfig(m=m, k=32, block_size=16, seed=3)
        tracemalloc.start()
        try:
            result = incremental_transfer(src, tgt, SQ, cfg)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        budget = 16 * (n * 3 * 8 + m * m * 8)
        assert peak < budget
        assert budget < n * n * 8 / 100
        assert result.source_mapped.rgb.shape == (n, 3)
        assert result.source_acc.mass.sum() == pytest.approx(32.0)
