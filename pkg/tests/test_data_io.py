import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochasticnet.data_io import (
    DataFormatError,
    LabeledDataset,
    load_cifar10_binary,
    load_idx,
    resize_to,
    subset,
    synth_blobs,
)

F32 = np.float32


def write_idx_pair(tmp_path, pixels, labels, image_magic=0x803, label_magic=0x801):
    """pixels: uint8 array [N, H, W]."""
    n, h, w = pixels.shape
    images_path = tmp_path / "images.idx"
    labels_path = tmp_path / "labels.idx"
    images_path.write_bytes(struct.pack(">iiii", image_magic, n, h, w) + pixels.tobytes())
    labels_path.write_bytes(struct.pack(">ii", label_magic, len(labels))
                            + np.asarray(labels, np.uint8).tobytes())
    return images_path, labels_path


class TestIdx:
    def test_two_image_fixture_roundtrip(self, tmp_path):
        pixels = np.arange(2 * 2 * 3, dtype=np.uint8).reshape(2, 2, 3) * 20
        img_p, lab_p = write_idx_pair(tmp_path, pixels, [1, 0])
        data = load_idx(img_p, lab_p)
        assert data.images.shape == (2, 1, 2, 3)
        np.testing.assert_array_equal(data.images, pixels[:, None].astype(F32) / 255.0)
        np.testing.assert_array_equal(data.labels, [1, 0])
        # byte-exact inversion of the 1/255 scaling
        np.testing.assert_array_equal(
            np.round(data.images * 255).astype(np.uint8), pixels[:, None]
        )

    def test_wrong_magic(self, tmp_path):
        pixels = np.zeros((1, 2, 2), np.uint8)
        img_p, lab_p = write_idx_pair(tmp_path, pixels, [0], image_magic=0x999)
        with pytest.raises(DataFormatError, match="magic"):
            load_idx(img_p, lab_p)

    def test_wrong_label_magic(self, tmp_path):
        pixels = np.zeros((1, 2, 2), np.uint8)
        img_p, lab_p = write_idx_pair(tmp_path, pixels, [0], label_magic=0x123)
        with pytest.raises(DataFormatError, match="magic"):
            load_idx(img_p, lab_p)

    def test_truncated_pixels(self, tmp_path):
        pixels = np.zeros((2, 4, 4), np.uint8)
        img_p, lab_p = write_idx_pair(tmp_path, pixels, [0, 1])
        img_p.write_bytes(img_p.read_bytes()[:-5])
        with pytest.raises(DataFormatError, match="truncated"):
            load_idx(img_p, lab_p)

    def test_count_mismatch(self, tmp_path):
        pixels = np.zeros((2, 2, 2), np.uint8)
        img_p, lab_p = write_idx_pair(tmp_path, pixels, [0, 1, 1])
        with pytest.raises(DataFormatError, match="2 images but 3 labels"):
            load_idx(img_p, lab_p)


class TestCifar:
    def make_batch(self, tmp_path, labels, pixel_fn, name="batch.bin"):
        records = bytearray()
        for i, label in enumerate(labels):
            records.append(label)
            records.extend(pixel_fn(i))
        path = tmp_path / name
        path.write_bytes(bytes(records))
        return path

    def test_two_record_fixture_roundtrip(self, tmp_path):
        gen = np.random.default_rng(0)
        pix = [gen.integers(0, 256, 3072, dtype=np.uint8) for _ in range(2)]
        path = self.make_batch(tmp_path, [3, 7], lambda i: pix[i].tobytes())
        data = load_cifar10_binary([path])
        assert data.images.shape == (2, 3, 32, 32)
        np.testing.assert_array_equal(data.labels, [3, 7])
        for i in range(2):
            np.testing.assert_array_equal(
                data.images[i].ravel(), pix[i].astype(F32) / 255.0
            )

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 3072)  # one record short by a byte
        with pytest.raises(DataFormatError, match="multiple"):
            load_cifar10_binary([path])

    def test_multiple_batches_concatenate(self, tmp_path):
        gen = np.random.default_rng(1)
        paths = []
        for b in range(2):
            pix = gen.integers(0, 256, 3072, dtype=np.uint8)
            paths.append(self.make_batch(tmp_path, [b], lambda i: pix.tobytes(),
                                         name=f"batch{b}.bin"))
        data = load_cifar10_binary(paths)
        assert data.n == 2
        np.testing.assert_array_equal(data.labels, [0, 1])

    def test_out_of_range_label_rejected(self, tmp_path):
        path = self.make_batch(tmp_path, [11], lambda i: bytes(3072))
        with pytest.raises(DataFormatError, match="labels"):
            load_cifar10_binary([path])


@pytest.fixture
def balanced_data():
    return synth_blobs(5, 20, (1, 8, 8), seed=42)


class TestSubset:
    def test_identity_fraction(self, balanced_data):
        sub = subset(balanced_data, 1.0, seed=0)
        assert sub.n == balanced_data.n
        assert np.bincount(sub.labels, minlength=5).tolist() == [20] * 5

    def test_stratified_ten_percent(self, balanced_data):
        sub = subset(balanced_data, 0.1, seed=0)
        assert np.bincount(sub.labels, minlength=5).tolist() == [2] * 5

    def test_ceiling(self, balanced_data):
        sub = subset(balanced_data, 0.051, seed=0)  # ceil(1.02) = 2 per class
        assert np.bincount(sub.labels, minlength=5).tolist() == [2] * 5

    def test_deterministic(self, balanced_data):
        a = subset(balanced_data, 0.3, seed=7)
        b = subset(balanced_data, 0.3, seed=7)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_bad_fraction(self, balanced_data):
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                subset(balanced_data, bad, seed=0)

    def test_missing_class_rejected(self):
        data = LabeledDataset(np.zeros((3, 1, 4, 4), F32), np.zeros(3, np.int64),
                              num_classes=2)
        with pytest.raises(ValueError, match="class 1"):
            subset(data, 0.5, seed=0)

    @settings(max_examples=20, deadline=None)
    @given(fraction=st.floats(0.05, 1.0), seed=st.integers(0, 100))
    def test_balance_within_one(self, fraction, seed):
        data = synth_blobs(3, 12, (1, 8, 8), seed=1)
        counts = np.bincount(subset(data, fraction, seed).labels, minlength=3)
        assert counts.max() - counts.min() <= 1


class TestResize:
    def test_identity(self, balanced_data):
        out = resize_to(balanced_data, 8)
        np.testing.assert_array_equal(out.images, balanced_data.images)

    def test_constant_image_preserved(self):
        images = np.full((1, 3, 96, 96), 0.25, F32)
        data = LabeledDataset(images, np.zeros(1, np.int64), 1)
        out = resize_to(data, 32)
        assert out.images.shape == (1, 3, 32, 32)
        np.testing.assert_allclose(out.images, 0.25, atol=1e-7)

    def test_block_means_hand_computed(self):
        grid = (np.arange(16, dtype=F32) / 15.0).reshape(1, 1, 4, 4)
        data = LabeledDataset(grid, np.zeros(1, np.int64), 1)
        out = resize_to(data, 2)
        expected = np.array([[10, 18], [42, 50]], F32) / (4 * 15)
        np.testing.assert_allclose(out.images[0, 0], expected, atol=1e-7)

    def test_bilinear_path_stays_in_range(self):
        gen = np.random.default_rng(3)
        images = gen.random((2, 1, 7, 7)).astype(F32)
        data = LabeledDataset(images, np.zeros(2, np.int64), 1)
        out = resize_to(data, 5)  # 7 -> 5 is not an integer ratio
        assert out.images.shape == (2, 1, 5, 5)
        assert out.images.min() >= 0.0 and out.images.max() <= 1.0

    def test_bad_side(self, balanced_data):
        with pytest.raises(ValueError):
            resize_to(balanced_data, 0)


class TestSynthBlobs:
    def test_counts(self):
        data = synth_blobs(2, 100, (1, 8, 8), seed=0)
        assert data.n == 200
        assert np.bincount(data.labels).tolist() == [100, 100]

    def test_deterministic(self):
        a = synth_blobs(3, 5, (1, 8, 8), seed=9)
        b = synth_blobs(3, 5, (1, 8, 8), seed=9)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_values_in_range(self):
        data = synth_blobs(4, 10, (3, 16, 16), seed=2)
        assert data.images.min() >= 0.0 and data.images.max() <= 1.0
        assert data.images.shape == (40, 3, 16, 16)

    def test_classes_are_separable_by_template_match(self):
        # nearest-class-template classification should be near perfect at high SNR
        data = synth_blobs(4, 25, (1, 16, 16), seed=5)
        templates = np.stack([
            data.images[data.labels == c].mean(axis=0).ravel() for c in range(4)
        ])
        flat = data.images.reshape(data.n, -1)
        pred = np.argmax(flat @ templates.T, axis=1)
        assert (pred == data.labels).mean() > 0.95


class TestDatasetValidation:
    def test_rejects_out_of_range_values(self):
        with pytest.raises(DataFormatError, match="\\[0, 1\\]"):
            LabeledDataset(np.full((1, 1, 2, 2), 1.5, F32), np.zeros(1, np.int64), 1)

    def test_rejects_non_finite(self):
        images = np.zeros((1, 1, 2, 2), F32)
        images[0, 0, 0, 0] = np.nan
        with pytest.raises(DataFormatError, match="finite"):
            LabeledDataset(images, np.zeros(1, np.int64), 1)

    def test_rejects_empty(self):
        with pytest.raises(DataFormatError):
            LabeledDataset(np.zeros((0, 1, 2, 2), F32), np.zeros(0, np.int64), 1)

    def test_rejects_label_count_mismatch(self):
        with pytest.raises(DataFormatError):
            LabeledDataset(np.zeros((2, 1, 2, 2), F32), np.zeros(3, np.int64), 1)
