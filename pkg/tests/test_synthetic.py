"""Synthetic digit generator tests (small sizes; full-scale runs are cached)."""

import json

import numpy as np
import pytest

from ibnlab.data import load_idx
from ibnlab.synthetic import (
    GENERATOR_VERSION,
    HI_RES,
    METADATA_FILE,
    OUT_RES,
    TEST_IMAGES,
    TEST_LABELS,
    TRAIN_IMAGES,
    TRAIN_LABELS,
    RenderParams,
    balanced_labels,
    digit_strokes,
    ensure_dataset,
    generate_images,
    render_variant_bank,
    write_dataset,
)

SMALL = RenderParams(variants_per_digit=4)


class TestSkeletons:
    def test_all_digits_defined(self):
        for d in range(10):
            strokes = digit_strokes(d)
            assert strokes, f"digit {d} has no strokes"
            for poly in strokes:
                assert poly.ndim == 2 and poly.shape[1] == 2
                assert poly.shape[0] >= 2
                assert poly.min() > 0.0 and poly.max() < 1.0

    def test_unknown_digit(self):
        with pytest.raises(ValueError):
            digit_strokes(10)


class TestBank:
    def test_shapes_and_range(self):
        bank = render_variant_bank(np.random.default_rng(0), SMALL)
        assert bank.shape == (10, 4, HI_RES, HI_RES)
        assert bank.min() >= 0.0 and bank.max() <= 1.0

    def test_every_variant_has_ink(self):
        bank = render_variant_bank(np.random.default_rng(1), SMALL)
        per_variant = bank.reshape(10, 4, -1).mean(axis=2)
        assert per_variant.min() > 0.01

    def test_variants_differ(self):
        bank = render_variant_bank(np.random.default_rng(2), SMALL)
        assert not np.array_equal(bank[3, 0], bank[3, 1])

    def test_seeded_reproducibility(self):
        a = render_variant_bank(np.random.default_rng(7), SMALL)
        b = render_variant_bank(np.random.default_rng(7), SMALL)
        c = render_variant_bank(np.random.default_rng(8), SMALL)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestSampling:
    def test_image_shapes(self):
        bank = render_variant_bank(np.random.default_rng(0), SMALL)
        labels = balanced_labels(30, np.random.default_rng(1))
        images = generate_images(labels, bank, np.random.default_rng(2), SMALL)
        assert images.shape == (30, OUT_RES, OUT_RES)
        assert images.dtype == np.uint8

    def test_balanced_labels_counts(self):
        labels = balanced_labels(60000, np.random.default_rng(0))
        np.testing.assert_array_equal(np.bincount(labels), [6000] * 10)
        uneven = balanced_labels(13, np.random.default_rng(0))
        counts = np.bincount(uneven, minlength=10)
        assert sorted(counts) == [1] * 7 + [2] * 3

    def test_classes_separable_by_centroid(self):
        # nearest-centroid across fresh train/test banks; guards against
        # degenerate rendering (blank or noise-dominated output)
        params = RenderParams(variants_per_digit=8)
        train_bank = render_variant_bank(np.random.default_rng(10), params)
        test_bank = render_variant_bank(np.random.default_rng(11), params)
        rng = np.random.default_rng(12)
        ytr = balanced_labels(600, rng)
        xtr = generate_images(ytr, train_bank, rng, params).reshape(600, -1) / 255.0
        yte = balanced_labels(200, rng)
        xte = generate_images(yte, test_bank, rng, params).reshape(200, -1) / 255.0
        centroids = np.stack([xtr[ytr == d].mean(axis=0) for d in range(10)])
        pred = np.argmin(((xte[:, None] - centroids[None]) ** 2).sum(axis=2), axis=1)
        assert (pred == yte).mean() >= 0.6


class TestFiles:
    def test_write_and_load(self, tmp_path):
        out = write_dataset(tmp_path, num_train=40, num_test=20, seed=5, params=SMALL)
        train = load_idx(out / TRAIN_IMAGES, out / TRAIN_LABELS)
        test = load_idx(out / TEST_IMAGES, out / TEST_LABELS)
        assert len(train) == 40 and len(test) == 20
        assert train.images.shape == (40, 1, 28, 28)
        meta = json.loads((out / METADATA_FILE).read_text())
        assert meta["generator_version"] == GENERATOR_VERSION
        assert meta["seed"] == 5

    def test_train_test_banks_independent(self, tmp_path):
        write_dataset(tmp_path, num_train=20, num_test=20, seed=5, params=SMALL)
        train = load_idx(tmp_path / TRAIN_IMAGES, tmp_path / TRAIN_LABELS)
        test = load_idx(tmp_path / TEST_IMAGES, tmp_path / TEST_LABELS)
        assert not np.array_equal(train.images, test.images)

    def test_byte_identical_regeneration(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        write_dataset(a, num_train=25, num_test=10, seed=3, params=SMALL)
        write_dataset(b, num_train=25, num_test=10, seed=3, params=SMALL)
        for name in (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_ensure_dataset_caches(self, tmp_path):
        ensure_dataset(tmp_path, num_train=25, num_test=10, seed=3, params=SMALL)
        stamp = (tmp_path / TRAIN_IMAGES).stat().st_mtime_ns
        ensure_dataset(tmp_path, num_train=25, num_test=10, seed=3, params=SMALL)
        assert (tmp_path / TRAIN_IMAGES).stat().st_mtime_ns == stamp

    def test_ensure_dataset_regenerates_on_mismatch(self, tmp_path):
        ensure_dataset(tmp_path, num_train=25, num_test=10, seed=3, params=SMALL)
        stamp = (tmp_path / TRAIN_IMAGES).stat().st_mtime_ns
        ensure_dataset(tmp_path, num_train=25, num_test=10, seed=4, params=SMALL)
        assert (tmp_path / TRAIN_IMAGES).stat().st_mtime_ns != stamp

    def test_ensure_dataset_regenerates_on_missing_file(self, tmp_path):
        ensure_dataset(tmp_path, num_train=25, num_test=10, seed=3, params=SMALL)
        (tmp_path / TEST_LABELS).unlink()
        ensure_dataset(tmp_path, num_train=25, num_test=10, seed=3, params=SMALL)
        assert (tmp_path / TEST_LABELS).exists()
