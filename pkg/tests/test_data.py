import numpy as np
import pytest
from PIL import Image

from rfnnest import data, images
from rfnnest.errors import CorpusError, InputError


def test_red_pixel_luma():
    rgb = np.zeros((2, 2, 3), dtype=np.uint8)
    rgb[..., 0] = 255
    assert images.to_gray(rgb)[0, 0] == pytest.approx(0.299, abs=1e-12)


def test_rgb_file_is_converted(tmp_path):
    rgb = np.zeros((4, 4, 3), dtype=np.uint8)
    rgb[..., 1] = 255
    Image.fromarray(rgb).save(tmp_path / "g.png")
    assert np.allclose(images.read_gray(tmp_path / "g.png"), 0.587)


def test_png_and_pgm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(9, 13)) / 255.0
    for suffix in (".png", ".pgm"):
        images.write_gray(tmp_path / f"x{suffix}", img)
        assert np.array_equal(images.read_gray(tmp_path / f"x{suffix}"), img)


def test_resize_is_bilinear_and_bounded(tmp_path):
    img = np.tile(np.linspace(0, 1, 32), (32, 1))
    images.write_gray(tmp_path / "ramp.png", img)
    out = images.read_gray(tmp_path / "ramp.png", size=16)
    assert out.shape == (16, 16)
    assert out.min() >= 0 and out.max() <= 1
    assert np.all(np.diff(out[0]) > 0)


def test_undecodable_names_path(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(CorpusError, match="broken.png"):
        images.read_gray(bad)


def test_to_uint8_rounds_and_clamps():
    assert images.to_uint8(np.array([-0.2, 0.0, 0.5, 1.0, 1.3])).tolist() == [0, 0, 128, 255, 255]


class TestCorpus:
    def test_single_sorted(self, tmp_path):
        ds = data.synthetic_images(3, 32, seed=0)
        data.write_corpus(ds, tmp_path)
        loaded = data.load_corpus(tmp_path, "single", image_size=32)
        assert loaded.ids == sorted(ds.ids)
        for a, b in zip(ds.images, loaded.images):
            assert np.abs(a - b).max() <= 0.5 / 255 + 1e-12

    def test_paired(self, tmp_path):
        ds = data.synthetic_pairs(3, 32, seed=0)
        data.write_corpus(ds, tmp_path)
        loaded = data.load_corpus(tmp_path, "paired", image_size=32)
        assert loaded.mode == "paired" and loaded.ids == ds.ids
        ir, vi = loaded.batch([0, 2])
        assert ir.shape == vi.shape == (2, 1, 32, 32)

    def test_orphan_is_named(self, tmp_path):
        data.write_corpus(data.synthetic_pairs(2, 32, seed=0), tmp_path)
        images.write_gray(tmp_path / "ir" / "lonely.png", np.zeros((32, 32)))
        with pytest.raises(CorpusError, match="lonely.png"):
            data.load_corpus(tmp_path, "paired")

    def test_missing_dir(self, tmp_path):
        with pytest.raises(CorpusError, match="nope"):
            data.load_corpus(tmp_path / "nope")

    def test_missing_subdir(self, tmp_path):
        (tmp_path / "ir").mkdir()
        with pytest.raises(CorpusError, match="vi"):
            data.load_corpus(tmp_path, "paired")

    def test_empty_dir_gives_empty_dataset(self, tmp_path):
        assert len(data.load_corpus(tmp_path)) == 0

    def test_bad_mode(self, tmp_path):
        with pytest.raises(InputError):
            data.load_corpus(tmp_path, "triple")

    def test_pair_dims_checked(self):
        with pytest.raises(InputError):
            data.ImagePair(np.zeros((4, 4)), np.zeros((4, 5)), "x")


class TestBatching:
    def test_same_seed_same_sequence(self):
        a = [(e, i.tolist()) for e, i in data.step_batches(10, 3, seed=5, steps=9)]
        b = [(e, i.tolist()) for e, i in data.step_batches(10, 3, seed=5, steps=9)]
        assert a == b

    def test_epochs_cover_all_items_and_reshuffle(self):
        batches = list(data.step_batches(10, 3, seed=1, steps=8))
        by_epoch = {}
        for e, idx in batches:
            by_epoch.setdefault(e, []).extend(idx.tolist())
        assert sorted(by_epoch[0]) == list(range(10)) and sorted(by_epoch[1]) == list(range(10))
        assert by_epoch[0] != by_epoch[1]
        assert len(batches) == 8 and [len(i) for _, i in batches[:4]] == [3, 3, 3, 1]

    def test_empty(self):
        with pytest.raises(CorpusError):
            list(data.step_batches(0, 4, 0, 1))


class TestSynthetic:
    def test_deterministic(self):
        a, b = data.synthetic_pairs(2, 32, seed=3), data.synthetic_pairs(2, 32, seed=3)
        assert all(np.array_equal(p.ir, q.ir) and np.array_equal(p.vi, q.vi) for p, q in zip(a.pairs, b.pairs))

    def test_ranges(self):
        for img in data.synthetic_images(4, 64, seed=0).images:
            assert img.shape == (64, 64) and img.min() >= 0 and img.max() <= 1 and img.std() > 0.05

    def test_infrared_has_hot_targets(self):
        for p in data.synthetic_pairs(4, 64, seed=0).pairs:
            assert p.ir.max() > 0.7
            assert np.median(p.ir) < 0.4
