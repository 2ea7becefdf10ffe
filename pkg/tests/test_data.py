from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aquaseg.data import (BandStats, ManifestEntry, MaskImage, RasterImage,
                          compute_band_stats, iterate_batches, load_band_stats, load_manifest,
                          load_raster_f32, normalize, patch_grid_count, patchify, read_raster,
                          save_band_stats, save_manifest, write_pgm, write_raster)
from aquaseg.errors import BadMagicError, ConfigError, ShapeError, TruncatedFileError
from aquaseg.prng import PrngState

GOLDEN = Path(__file__).parent / "golden"


class TestAqr:
    def test_f32_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        img = RasterImage.from_array(rng.standard_normal((4, 64, 64)).astype(np.float32))
        path = tmp_path / "img.aqr"
        write_raster(img, path)
        back = read_raster(path)
        assert (back.width, back.height, back.bands, back.dtype) == (64, 64, 4, "f32")
        assert np.array_equal(back.data, img.data)

    def test_u8_mask_roundtrip(self, tmp_path):
        mask = MaskImage(data=(np.random.default_rng(1).random((16, 16)) > 0.5).astype(np.uint8))
        path = tmp_path / "mask.aqr"
        write_raster(mask.to_raster(), path)
        assert np.array_equal(MaskImage.from_raster(read_raster(path)).data, mask.data)

    def test_truncated_payload(self, tmp_path):
        img = RasterImage.from_array(np.zeros((1, 8, 8), dtype=np.float32))
        path = tmp_path / "short.aqr"
        write_raster(img, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-9])
        with pytest.raises(TruncatedFileError, match="payload"):
            read_raster(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.aqr"
        path.write_bytes(b"JUNK" + b"\x00" * 32)
        with pytest.raises(BadMagicError):
            read_raster(path)

    def test_unsupported_dtype_code(self, tmp_path):
        img = RasterImage.from_array(np.zeros((1, 2, 2), dtype=np.uint8))
        path = tmp_path / "odd.aqr"
        write_raster(img, path)
        raw = bytearray(path.read_bytes())
        raw[16] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(ConfigError, match="dtype"):
            read_raster(path)

    def test_golden_raster_bytes(self, tmp_path):
        vals = PrngState(3).uniform(4 * 4 * 4).astype(np.float32).reshape(4, 4, 4)
        path = tmp_path / "fresh.aqr"
        write_raster(RasterImage.from_array(vals), path)
        assert path.read_bytes() == (GOLDEN / "raster_4x4_seed3.aqr").read_bytes()
        mask = (PrngState(4).uniform(16).reshape(4, 4) > 0.5).astype(np.uint8)
        path2 = tmp_path / "fresh_mask.aqr"
        write_raster(MaskImage(data=mask).to_raster(), path2)
        assert path2.read_bytes() == (GOLDEN / "mask_4x4_seed4.aqr").read_bytes()

    def test_golden_header_layout(self):
        raw = (GOLDEN / "raster_4x4_seed3.aqr").read_bytes()
        assert raw[:4] == b"AQR1"
        # little-endian u32 width, height, bands, dtype code 1 (f32)
        assert raw[4:20] == (b"\x04\x00\x00\x00" * 2 + b"\x04\x00\x00\x00" + b"\x01\x00\x00\x00")
        assert len(raw) == 20 + 4 * 4 * 4 * 4

    def test_u8_scaling_on_load(self, tmp_path):
        img = RasterImage.from_array(np.full((1, 2, 2), 255, dtype=np.uint8))
        path = tmp_path / "white.aqr"
        write_raster(img, path)
        assert np.allclose(load_raster_f32(path), 1.0)


def test_pgm_layout(tmp_path):
    gray = np.arange(6, dtype=np.uint8).reshape(2, 3) * 40
    path = tmp_path / "m.pgm"
    write_pgm(path, gray)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n")
    assert raw[len(b"P5\n3 2\n255\n"):] == gray.tobytes()


class TestPatchify:
    def test_large_scene_tile_count(self):
        img = RasterImage.from_array(np.zeros((1, 6000, 6000), dtype=np.uint8))
        patches = patchify(img, None, 512, 512)
        assert len(patches) == 121  # 11 x 11 full windows

    def test_exact_fit_returns_single_identical_patch(self):
        rng = np.random.default_rng(2)
        arr = rng.standard_normal((2, 32, 32)).astype(np.float32)
        patches = patchify(RasterImage.from_array(arr), None, 32)
        assert len(patches) == 1
        assert np.array_equal(patches[0].image.data, arr)

    def test_trailing_pixels_dropped(self):
        img = RasterImage.from_array(np.zeros((1, 130, 130), dtype=np.uint8))
        patches = patchify(img, None, 64, 64)
        assert len(patches) == 4
        assert {(p.ox, p.oy) for p in patches} == {(0, 0), (64, 0), (0, 64), (64, 64)}

    def test_patch_pixels_match_source_by_offset(self):
        rng = np.random.default_rng(3)
        arr = rng.standard_normal((3, 40, 50)).astype(np.float32)
        mask = MaskImage(data=(rng.random((40, 50)) > 0.5).astype(np.uint8))
        for patch in patchify(RasterImage.from_array(arr), mask, 16, 12):
            assert np.array_equal(patch.image.data,
                                  arr[:, patch.oy:patch.oy + 16, patch.ox:patch.ox + 16])
            assert np.array_equal(patch.mask.data,
                                  mask.data[patch.oy:patch.oy + 16, patch.ox:patch.ox + 16])

    @given(w=st.integers(4, 40), h=st.integers(4, 40),
           size=st.integers(2, 8), stride=st.integers(1, 6))
    @settings(max_examples=200)
    def test_count_matches_closed_form(self, w, h, size, stride):
        if size > min(w, h):
            return
        img = RasterImage.from_array(np.zeros((1, h, w), dtype=np.uint8))
        patches = patchify(img, None, size, stride)
        assert len(patches) == patch_grid_count(w, h, size, stride)
        assert len(patches) == ((w - size) // stride + 1) * ((h - size) // stride + 1)

    def test_oversized_patch_rejected(self):
        img = RasterImage.from_array(np.zeros((1, 8, 8), dtype=np.uint8))
        with pytest.raises(ShapeError):
            patchify(img, None, 16)

    def test_mask_image_dim_mismatch(self):
        img = RasterImage.from_array(np.zeros((1, 8, 8), dtype=np.uint8))
        mask = MaskImage(data=np.zeros((9, 8), dtype=np.uint8))
        with pytest.raises(ShapeError):
            patchify(img, mask, 4)


class TestNormalize:
    def test_constant_band_maps_to_zeros(self):
        stats = compute_band_stats([np.full((1, 4, 4), 0.7, dtype=np.float32)])
        out = normalize(np.full((2, 1, 4, 4), 0.7, dtype=np.float32), stats)
        assert np.array_equal(out.data, np.zeros((2, 1, 4, 4), dtype=np.float32))

    def test_reapply_is_identical(self):
        rng = np.random.default_rng(4)
        imgs = [rng.standard_normal((4, 8, 8)).astype(np.float32) for _ in range(3)]
        stats = compute_band_stats(imgs)
        batch = np.stack(imgs)
        a = normalize(batch, stats).data
        b = normalize(batch, stats).data
        assert np.array_equal(a, b)

    def test_normalized_train_split_has_zero_mean_unit_std(self):
        rng = np.random.default_rng(5)
        scales = np.array([0.1, 0.2, 0.3, 0.4]).reshape(4, 1, 1)
        imgs = [(rng.standard_normal((4, 16, 16)) * scales + 2.0).astype(np.float32)
                for _ in range(8)]
        stats = compute_band_stats(imgs)
        out = normalize(np.stack(imgs), stats).data.astype(np.float64)
        for band in range(4):
            assert abs(out[:, band].mean()) < 1e-3
            assert abs(out[:, band].std() - 1.0) < 1e-3

    def test_stats_file_roundtrip_exact(self, tmp_path):
        stats = BandStats(mean=np.array([0.1, -2.5, 1e-9, 3.0]),
                          std=np.array([1.0, 0.5, 2.0, 7.0]))
        path = tmp_path / "band_stats.txt"
        save_band_stats(path, stats)
        back = load_band_stats(path)
        assert np.array_equal(back.mean, stats.mean)
        assert np.array_equal(back.std, stats.std)

    def test_missing_stats_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_band_stats(tmp_path / "band_stats.txt")

    def test_band_count_mismatch(self):
        stats = compute_band_stats([np.zeros((2, 4, 4), dtype=np.float32)])
        with pytest.raises(ShapeError):
            normalize(np.zeros((1, 3, 4, 4), dtype=np.float32), stats)


def _write_tiny_dataset(tmp_path, n_entries=6, role="vhr_labelled", size=8):
    rng = np.random.default_rng(0)
    entries = []
    for i in range(n_entries):
        img = RasterImage.from_array(rng.standard_normal((4, size, size)).astype(np.float32))
        mask = MaskImage(data=(rng.random((size, size)) > 0.5).astype(np.uint8))
        write_raster(img, tmp_path / f"img{i}.aqr")
        write_raster(mask.to_raster(), tmp_path / f"mask{i}.aqr")
        entries.append(ManifestEntry(image_path=f"img{i}.aqr", mask_path=f"mask{i}.aqr",
                                     role=role, split="train"))
    save_manifest(tmp_path / "manifest.csv", entries)
    return tmp_path / "manifest.csv"


class TestManifest:
    def test_roundtrip(self, tmp_path):
        path = _write_tiny_dataset(tmp_path)
        manifest = load_manifest(path)
        assert len(manifest.entries) == 6
        assert manifest.select("vhr_labelled", "train")[0].image_path == "img0.aqr"
        assert manifest.select("vhr_labelled", "val") == []

    def test_unknown_role_rejected(self, tmp_path):
        path = _write_tiny_dataset(tmp_path)
        text = path.read_text().replace("vhr_labelled", "mystery", 1)
        path.write_text(text)
        with pytest.raises(ConfigError, match="role"):
            load_manifest(path)

    def test_unlabelled_with_mask_rejected(self, tmp_path):
        path = _write_tiny_dataset(tmp_path)
        text = path.read_text().replace("vhr_labelled", "vhr_unlabelled", 1)
        path.write_text(text)
        with pytest.raises(ConfigError, match="unlabelled"):
            load_manifest(path)

    def test_labelled_without_mask_rejected(self, tmp_path):
        path = _write_tiny_dataset(tmp_path)
        lines = path.read_text().splitlines()
        img, _, role, split = lines[1].split(",")
        lines[1] = f"{img},,{role},{split}"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ConfigError, match="mask"):
            load_manifest(path)

    def test_missing_file_rejected(self, tmp_path):
        path = _write_tiny_dataset(tmp_path)
        (tmp_path / "img0.aqr").unlink()
        with pytest.raises(FileNotFoundError):
            load_manifest(path)

    def test_select_unknown_split(self, tmp_path):
        manifest = load_manifest(_write_tiny_dataset(tmp_path))
        with pytest.raises(ConfigError):
            manifest.select("vhr_labelled", "holdout")


class TestBatching:
    def test_epoch_batch_count_drops_remainder(self, tmp_path):
        # 733 entries sharing one tiny raster: batch 2 -> 366 full batches
        rng = np.random.default_rng(0)
        img = RasterImage.from_array(rng.standard_normal((4, 4, 4)).astype(np.float32))
        mask = MaskImage(data=np.zeros((4, 4), dtype=np.uint8))
        write_raster(img, tmp_path / "img.aqr")
        write_raster(mask.to_raster(), tmp_path / "mask.aqr")
        entries = [ManifestEntry("img.aqr", "mask.aqr", "vhr_labelled", "train")
                   for _ in range(733)]
        save_manifest(tmp_path / "manifest.csv", entries)
        manifest = load_manifest(tmp_path / "manifest.csv")
        cache = {}
        n = sum(1 for _ in iterate_batches(manifest, "vhr_labelled", "train", 2,
                                           PrngState(1), cache=cache))
        assert n == 366

    def test_same_seed_same_batch_order(self, tmp_path):
        manifest = load_manifest(_write_tiny_dataset(tmp_path, 7))
        def orders(seed):
            out = []
            for images, _ in iterate_batches(manifest, "vhr_labelled", "train", 2,
                                             PrngState(seed)):
                out.append(images.copy())
            return out
        a, b = orders(9), orders(9)
        assert len(a) == 3  # 7 entries, batch 2, last dropped
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        c = orders(10)
        assert any(not np.array_equal(x, y) for x, y in zip(a, c))

    def test_eval_covers_every_entry_exactly_once(self, tmp_path):
        manifest = load_manifest(_write_tiny_dataset(tmp_path, 7))
        seen = []
        for images, masks in iterate_batches(manifest, "vhr_labelled", "train", 2,
                                             PrngState(3), drop_last=False):
            assert masks.shape[1:] == (1, 8, 8)
            seen.extend(images[i] for i in range(images.shape[0]))
        assert len(seen) == 7
        # match each yielded image back to its source entry; no duplicates
        sources = [load_raster_f32(tmp_path / f"img{i}.aqr") for i in range(7)]
        matched = [next(i for i, s in enumerate(sources) if np.array_equal(s, img))
                   for img in seen]
        assert sorted(matched) == list(range(7))

    def test_train_epoch_is_split_minus_remainder_no_duplicates(self, tmp_path):
        manifest = load_manifest(_write_tiny_dataset(tmp_path, 7))
        seen = []
        for images, _ in iterate_batches(manifest, "vhr_labelled", "train", 2, PrngState(5)):
            seen.extend(images[i] for i in range(images.shape[0]))
        assert len(seen) == 6
        sources = [load_raster_f32(tmp_path / f"img{i}.aqr") for i in range(7)]
        matched = [next(i for i, s in enumerate(sources) if np.array_equal(s, img))
                   for img in seen]
        assert len(set(matched)) == 6
