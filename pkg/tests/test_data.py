from __future__ import annotations

import numpy as np
import pytest

from smmix import data
from smmix.data import (DATA_FILE, HEADER, MANIFEST_FILE, MANIFEST_HEADER, LabelRangeError,
                        MagicMismatchError, TruncatedFileError, VersionMismatchError, load_arrays,
                        load_dataset, read_header, shuffled, synth_arrays, synth_generate, write_dataset)


def test_generation_is_byte_identical(tmp_path):
    a = synth_generate(40, tmp_path / "a", seed=3)
    b = synth_generate(40, tmp_path / "b", seed=3)
    for name in (DATA_FILE, MANIFEST_FILE):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = synth_generate(40, tmp_path / "c", seed=4)
    assert (a / DATA_FILE).read_bytes() != (c / DATA_FILE).read_bytes()


def test_class_balance_4000():
    _, labels, _ = synth_arrays(4000, seed=11, size=16)
    counts = np.bincount(labels, minlength=4)
    assert np.all(np.abs(counts - 1000) <= 50)


def test_shape_boxes_inside_frame():
    images, labels, boxes = synth_arrays(400, seed=5)
    for box in boxes:
        assert 0 <= box.top <= box.bottom < 32
        assert 0 <= box.left <= box.right < 32
    assert images.dtype == np.uint8 and images.shape == (400, 3, 32, 32)


def test_shapes_are_distinct_masks():
    masks = [data._shape_mask(k, 32, 15.5, 15.5, 8.0) for k in data.SHAPES]
    for i in range(4):
        for j in range(i + 1, 4):
            assert (masks[i] != masks[j]).any()


def test_split_manifest_80_20(tmp_path):
    path = synth_generate(50, tmp_path, seed=0)
    splits = [s for _, s in data.read_manifest(path)]
    assert splits.count("train") == 40 and splits.count("val") == 10
    assert splits == sorted(splits)  # train block then val block


def test_round_trip_bit_exact(tmp_path):
    images, labels, _ = synth_arrays(30, seed=9)
    path = synth_generate(30, tmp_path, seed=9)
    x, y = load_arrays(path)
    np.testing.assert_array_equal(np.rint(x * 255).astype(np.uint8), images)
    np.testing.assert_array_equal(y, labels)
    samples = list(load_dataset(path, "val"))
    assert len(samples) == 6
    np.testing.assert_array_equal(samples[0].image, x[24])
    assert all(0.0 <= s.image.min() and s.image.max() <= 1.0 for s in samples)


def test_empty_manifest_is_empty_iterator(tmp_path):
    synth_generate(4, tmp_path, seed=0)
    (tmp_path / MANIFEST_FILE).write_text(MANIFEST_HEADER + "\n")
    assert list(load_dataset(tmp_path)) == []


def test_bad_magic(tmp_path):
    path = synth_generate(4, tmp_path, seed=0)
    raw = bytearray((path / DATA_FILE).read_bytes())
    raw[:4] = b"XXXX"
    (path / DATA_FILE).write_bytes(bytes(raw))
    with pytest.raises(MagicMismatchError):
        list(load_dataset(path))


def test_version_mismatch(tmp_path):
    path = synth_generate(4, tmp_path, seed=0)
    raw = bytearray((path / DATA_FILE).read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    (path / DATA_FILE).write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        read_header(path)


def test_truncated_file(tmp_path):
    path = synth_generate(4, tmp_path, seed=0)
    raw = (path / DATA_FILE).read_bytes()
    (path / DATA_FILE).write_bytes(raw[:-10])
    with pytest.raises(TruncatedFileError):
        load_arrays(path)
    (path / DATA_FILE).write_bytes(raw[:HEADER.size - 3])
    with pytest.raises(TruncatedFileError):
        read_header(path)


def test_label_out_of_range(tmp_path):
    images = np.zeros((2, 1, 4, 4), dtype=np.uint8)
    path = write_dataset(tmp_path, images, np.array([0, 7]), num_classes=4)
    with pytest.raises(LabelRangeError):
        load_arrays(path)


def test_error_kinds_are_distinct():
    kinds = {MagicMismatchError, VersionMismatchError, TruncatedFileError, LabelRangeError}
    assert all(issubclass(k, data.DatasetError) for k in kinds) and len(kinds) == 4


def test_shuffled_is_seeded_permutation():
    p = shuffled(100, seed=1, epoch=0)
    assert sorted(p) == list(range(100))
    assert np.array_equal(p, shuffled(100, 1, 0))
    assert not np.array_equal(p, shuffled(100, 1, 1))


def test_rejects_bad_arguments():
    with pytest.raises(ValueError):
        synth_arrays(0, seed=0)
    with pytest.raises(ValueError):
        synth_arrays(4, seed=0, num_classes=5)
