import numpy as np
import pytest
import torch

from attrobust.datasets import (ArrayDataset, balance_by_augmentation, class_texture_patterns,
                                export_wsol_fixture, load_dataset, make_synthetic_shapes,
                                subset_indices)
from attrobust.wsol import load_manifest


class TestSyntheticShapes:
    def test_deterministic(self):
        a = make_synthetic_shapes(20, seed=5)
        b = make_synthetic_shapes(20, seed=5)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.boxes, b.boxes)

    def test_value_range_and_shapes(self):
        ds = make_synthetic_shapes(10, seed=1)
        assert ds.images.shape == (10, 3, 32, 32)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert ds.boxes.shape == (10, 4)

    def test_boxes_are_tight_over_bright_region(self):
        ds = make_synthetic_shapes(30, seed=2, texture_amplitude=0.0, pixel_noise=0.0,
                                   background_noise=0.1, fg_low=0.8, fg_high=0.9)
        for i in range(30):
            x0, y0, x1, y1 = ds.boxes[i]
            bright = ds.images[i].mean(axis=0) > 0.5
            rows = np.flatnonzero(bright.any(axis=1))
            cols = np.flatnonzero(bright.any(axis=0))
            assert (cols[0], rows[0], cols[-1], rows[-1]) == (x0, y0, x1, y1)

    def test_texture_patterns_fixed_across_splits(self):
        train = make_synthetic_shapes(15, seed=3)
        test = make_synthetic_shapes(15, seed=99)
        pat = class_texture_patterns(10, 32, 6 / 255)
        assert pat.shape == (10, 3, 32, 32)
        # same pattern tensor regardless of the data seed
        assert np.array_equal(class_texture_patterns(10, 32, 6 / 255),
                              class_texture_patterns(10, 32, 6 / 255))
        assert train.images.dtype == test.images.dtype == np.float32

    def test_train_test_disjoint_generation(self):
        tr = load_dataset("synthetic", subset_size=12, seed=0, split="train")
        te = load_dataset("synthetic", subset_size=12, seed=0, split="test")
        assert not np.array_equal(tr.images, te.images)


class TestSubsetting:
    def test_identical_index_list_across_runs(self):
        a = subset_indices(1000, 100, seed=42)
        b = subset_indices(1000, 100, seed=42)
        assert np.array_equal(a, b)
        c = subset_indices(1000, 100, seed=43)
        assert not np.array_equal(a, c)

    def test_full_when_not_needed(self):
        assert np.array_equal(subset_indices(10, None, 0), np.arange(10))


class TestIterBatches:
    def test_shuffle_deterministic_given_generator(self):
        ds = make_synthetic_shapes(40, seed=4)
        g1 = torch.Generator().manual_seed(5)
        g2 = torch.Generator().manual_seed(5)
        b1 = [x for x, _ in ds.iter_batches(16, shuffle=True, generator=g1)]
        b2 = [x for x, _ in ds.iter_batches(16, shuffle=True, generator=g2)]
        for a, b in zip(b1, b2):
            assert torch.equal(a, b)

    def test_augment_preserves_shape_and_range(self):
        ds = make_synthetic_shapes(16, seed=6)
        g = torch.Generator().manual_seed(0)
        (x, y), = list(ds.iter_batches(16, shuffle=False, generator=g, augment=True))
        assert x.shape == (16, 3, 32, 32)
        assert float(x.min()) >= 0.0 and float(x.max()) <= 1.0


class TestBalance:
    def test_counts_equalized(self):
        images = np.random.default_rng(0).uniform(size=(12, 3, 8, 8)).astype(np.float32)
        labels = np.array([0] * 8 + [1] * 4, dtype=np.int64)
        ds = ArrayDataset(images, labels)
        out = balance_by_augmentation(ds, seed=1)
        counts = np.bincount(out.labels)
        assert counts[0] == counts[1] == 8
        assert out.images.min() >= 0.0 and out.images.max() <= 1.0

    def test_noop_when_balanced(self):
        images = np.zeros((4, 3, 8, 8), dtype=np.float32)
        labels = np.array([0, 0, 1, 1], dtype=np.int64)
        out = balance_by_augmentation(ArrayDataset(images, labels), seed=0)
        assert len(out) == 4


class TestLoaders:
    def test_unknown_dataset(self):
        with pytest.raises(ValueError):
            load_dataset("imagenet")

    def test_missing_files_descriptive_error(self, tmp_path, monkeypatch):
        monkeypatch.delenv("ATTROBUST_DATA_ROOT", raising=False)
        with pytest.raises(FileNotFoundError):
            load_dataset("cifar10", subset_size=10)
        with pytest.raises(FileNotFoundError):
            load_dataset("cifar10", subset_size=10, data_root=str(tmp_path))

    def test_wsol_fixture_manifest(self, tmp_path):
        manifest = export_wsol_fixture(tmp_path, n=6, seed=0)
        rows = load_manifest(manifest)
        assert len(rows) == 6
        from PIL import Image

        img = Image.open(tmp_path / rows[0]["image"])
        assert img.size == (32, 32)
        box = rows[0]["box"]
        assert 0 <= box.x_min <= box.x_max <= 31
