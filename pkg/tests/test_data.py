import json
import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from fmehscmt.data import (KAGGLE_CLASSES, KAGGLE_COUNTS, Sample, SampleList, augment,
                           export_dataset, images_labels, is_kaggle_layout, load_dataset,
                           oversample_balance, split, synth_generate, transform_image)
from fmehscmt.errors import ConfigError, DatasetError


def write_png(path, pixels):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path)


class TestLoad:
    def test_white_png(self, tmp_path):
        write_png(tmp_path / "a" / "x.png", np.full((2, 2), 255))
        samples = load_dataset(tmp_path, 2)
        assert len(samples) == 1
        assert samples[0].image.shape == (2, 2)
        assert np.all(samples[0].image == 1.0)

    def test_non_image_is_skipped(self, tmp_path, caplog):
        write_png(tmp_path / "a" / "x.png", np.zeros((4, 4)))
        write_png(tmp_path / "b" / "y.png", np.full((4, 4), 128))
        (tmp_path / "b" / "notes.txt").write_text("not an image")
        with caplog.at_level(logging.WARNING, logger="fmehscmt.data"):
            samples = load_dataset(tmp_path, 8)
        assert len(samples) == 2 and samples.skipped == 1
        assert sum("notes.txt" in r.getMessage() for r in caplog.records) == 1
        assert samples.class_names == ["a", "b"]
        assert [s.label for s in samples] == [0, 1]
        assert samples[0].image.shape == (8, 8)

    def test_rgb_is_converted_to_luminance(self, tmp_path):
        (tmp_path / "c").mkdir()
        Image.fromarray(np.full((3, 3, 3), 200, np.uint8), mode="RGB").save(tmp_path / "c" / "z.jpg")
        s = load_dataset(tmp_path, 3)[0]
        assert s.image.ndim == 2 and 0.7 < s.image.mean() < 0.85

    def test_empty_class_and_missing_root(self, tmp_path):
        write_png(tmp_path / "a" / "x.png", np.zeros((2, 2)))
        (tmp_path / "empty").mkdir()
        with pytest.raises(DatasetError):
            load_dataset(tmp_path, 2)
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "nope", 2)

    def test_export_roundtrip(self, tmp_path):
        samples = synth_generate(3, 16, seed=2)
        paths = export_dataset(samples, tmp_path, samples.class_names)
        assert len(paths) == 12
        back = load_dataset(tmp_path, 16)
        assert back.class_names == list(samples.class_names)
        for a, b in zip(samples, back):
            assert a.label == b.label
            assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-7

    def test_sample_validation(self):
        with pytest.raises(DatasetError):
            Sample(np.full((2, 2), 1.5, np.float32), 0)
        with pytest.raises(DatasetError):
            Sample(np.zeros((2, 2), np.float32), -1)


class TestAugment:
    def test_skip_all_is_identity(self, rng):
        s = synth_generate(1, 32, seed=0)[2]
        out = augment(s, rng, p=0.0)
        assert out.image.tobytes() == s.image.tobytes()
        assert out.label == s.label

    def test_flip_involution(self, rng):
        img = rng.random((9, 7)).astype(np.float32)
        twice = transform_image(transform_image(img, hflip=True), hflip=True)
        assert np.max(np.abs(twice - img)) < 1e-6
        np.testing.assert_array_equal(transform_image(img, vflip=True), img[::-1])

    def test_unit_scale_zero_shear(self, rng):
        img = rng.random((12, 12)).astype(np.float32)
        assert np.max(np.abs(transform_image(img, scale=1.0, shear_deg=0.0) - img)) < 1e-6

    def test_scale_about_centre(self):
        img = np.zeros((9, 9), np.float32)
        img[4, 4] = 1.0
        out = transform_image(img, scale=1.1)
        assert out.argmax() == 4 * 9 + 4

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_label_and_range_preserved(self, seed):
        rng = np.random.default_rng(seed)
        s = Sample(rng.random((16, 16)).astype(np.float32), int(rng.integers(4)))
        out = augment(s, rng, p=0.7)
        assert out.label == s.label
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0
        assert out.image.shape == s.image.shape and out.image.dtype == s.image.dtype


def kaggle_like():
    samples = []
    for label, name in enumerate(KAGGLE_CLASSES):
        for i in range(sum(KAGGLE_COUNTS[name])):
            samples.append(Sample(np.zeros((4, 4), np.float32), label, f"{name}/{i}"))
    return SampleList(samples, KAGGLE_CLASSES)


class TestBalanceAndSplit:
    def test_kaggle_counts(self):
        samples = kaggle_like()
        assert is_kaggle_layout(samples)
        totals = Counter(s.label for s in samples)
        assert [totals[i] for i in range(4)] == [896, 65, 3200, 2240]
        parts = split(samples, seed=0)
        train = Counter(s.label for s in parts.train)
        assert [train[i] for i in range(4)] == [574, 41, 2048, 1434]
        balanced = oversample_balance(parts.train, np.random.default_rng(0))
        counts = Counter(s.label for s in balanced)
        assert all(counts[i] == 2048 for i in range(4)) and len(balanced) == 8192
        # originals retained, and listed first
        assert [s.source_path for s in balanced[:len(parts.train)]] == \
            [s.source_path for s in parts.train]

    def test_balanced_and_single_class_unchanged(self, rng):
        even = [Sample(np.zeros((2, 2), np.float32), k % 3) for k in range(9)]
        assert oversample_balance(even, rng) == even
        single = [Sample(np.zeros((2, 2), np.float32), 1) for _ in range(4)]
        assert oversample_balance(single, rng) == single
        assert oversample_balance([], rng) == []

    def test_split_sizes_and_determinism(self):
        samples = synth_generate(100, 16, seed=1)
        parts = split(samples, (0.8, 0.1, 0.1), seed=5)
        assert (len(parts.train), len(parts.val), len(parts.test)) == (320, 40, 40)
        for part, n in ((parts.train, 80), (parts.val, 10), (parts.test, 10)):
            assert set(Counter(s.label for s in part).values()) == {n}
        again = split(samples, (0.8, 0.1, 0.1), seed=5)
        assert again.manifest() == parts.manifest()
        other = split(samples, (0.8, 0.1, 0.1), seed=6)
        assert other.manifest()["train"] != parts.manifest()["train"]

    def test_split_is_partition(self):
        samples = synth_generate(13, 16, seed=1)
        parts = split(samples, seed=3)
        names = [s.source_path for part in (parts.train, parts.val, parts.test) for s in part]
        assert sorted(names) == sorted(s.source_path for s in samples)
        assert len(set(names)) == len(names)
        for part in (parts.train, parts.val, parts.test):
            assert len(Counter(s.label for s in part)) == 4

    @pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.5), (0.8, 0.2), (1.0, 0.0, 0.0)])
    def test_bad_fractions(self, fractions):
        with pytest.raises(ConfigError):
            split(synth_generate(2, 16, seed=0), fractions)

    def test_manifest_file(self, tmp_path):
        parts = split(synth_generate(5, 16, seed=0), seed=0)
        parts.write_manifest(tmp_path / "split.json")
        data = json.loads((tmp_path / "split.json").read_text(encoding="utf-8"))
        assert set(data) == {"seed", "class_names", "train", "val", "test"}


class TestSynthetic:
    def test_counts_and_determinism(self):
        a = synth_generate(100, 32, seed=9)
        b = synth_generate(100, 32, seed=9)
        assert len(a) == 400 and Counter(s.label for s in a) == {0: 100, 1: 100, 2: 100, 3: 100}
        assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
        c = synth_generate(100, 32, seed=10)
        assert a[0].image.tobytes() != c[0].image.tobytes()

    def test_size_limit(self):
        with pytest.raises(ConfigError):
            synth_generate(1, 8, seed=0)

    def test_nearest_centroid_separability(self):
        parts = split(synth_generate(100, 64, seed=0), (0.8, 0.1, 0.1), seed=0)
        x, y = images_labels(parts.train)
        xt, yt = images_labels(parts.test + parts.val)
        x, xt = x.reshape(len(x), -1), xt.reshape(len(xt), -1)
        centroids = np.stack([x[y == k].mean(0) for k in range(4)])
        dist = ((xt[:, None, :] - centroids[None]) ** 2).sum(-1)
        assert (dist.argmin(1) == yt).mean() > 0.9
