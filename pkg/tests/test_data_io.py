import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from disentangle.data_io import (
    CANVAS,
    IdxError,
    IdxImages,
    IdxTruncated,
    IdxWrongType,
    load_dataset,
    load_idx_images,
    make_localization_dataset,
    parse_idx_images,
    paste,
    position_to_offset,
    save_dataset,
    save_idx_images,
    standardize,
    synthetic_digits,
)
from disentangle.generative import data_covariance


def test_parse_hand_built_file(tmp_path):
    raw = bytes.fromhex("00000803" "00000001" "00000002" "00000002") + bytes([0, 128, 255, 7])
    path = tmp_path / "one.idx"
    path.write_bytes(raw)
    img = load_idx_images(path)
    assert (img.count, img.rows, img.cols) == (1, 2, 2)
    np.testing.assert_array_equal(img.pixels[0], [[0, 128], [255, 7]])
    save_idx_images(img, tmp_path / "again.idx")
    assert (tmp_path / "again.idx").read_bytes() == raw


def test_label_file_rejected():
    raw = bytes.fromhex("00000801" "00000001") + b"\x03"
    with pytest.raises(IdxWrongType, match="label"):
        parse_idx_images(raw + b"\x00" * 8)


def test_truncation_and_garbage():
    with pytest.raises(IdxTruncated):
        parse_idx_images(b"")
    header = struct.pack(">IIII", 0x803, 2, 2, 2)
    with pytest.raises(IdxTruncated):
        parse_idx_images(header + b"\x00" * 7)
    with pytest.raises(IdxError):
        parse_idx_images(header + b"\x00" * 9)
    with pytest.raises(IdxWrongType):
        parse_idx_images(struct.pack(">IIII", 0x1234, 1, 1, 1) + b"\x00")
    with pytest.raises(IdxError, match="large"):
        parse_idx_images(struct.pack(">IIII", 0x803, 2**32 - 1, 2**32 - 1, 2**32 - 1))


@given(st.integers(0, 4), st.integers(1, 5), st.integers(1, 5), st.data())
def test_idx_round_trip(count, rows, cols, data):
    pixels = data.draw(st.binary(min_size=count * rows * cols, max_size=count * rows * cols))
    raw = struct.pack(">IIII", 0x803, count, rows, cols) + pixels
    assert parse_idx_images(raw).to_bytes() == raw


def test_synthetic_digits():
    d = synthetic_digits()
    assert (d.count, d.rows, d.cols) == (64, 28, 28)
    assert d.pixels.max() == 255
    assert all(d.pixels[i].any() for i in range(d.count))
    assert np.array_equal(d.pixels, synthetic_digits().pixels)


def test_offsets():
    np.testing.assert_array_equal(position_to_offset(np.zeros(2)), [6, 6])
    np.testing.assert_array_equal(position_to_offset(np.array([100.0, -100.0])), [12, 0])
    np.testing.assert_array_equal(position_to_offset(np.array([0.4, -0.6])), [6, 5])
    assert paste(np.ones((28, 28)), (12, 12)).shape == (CANVAS, CANVAS)


def test_paste_places_digit():
    digit = np.arange(28 * 28, dtype=float).reshape(28, 28) + 1
    canvas = paste(digit, (3, 9))
    np.testing.assert_array_equal(canvas[3:31, 9:37], digit)
    assert canvas.sum() == digit.sum()


def test_localization_dataset_contents():
    digits = synthetic_digits()
    ds = make_localization_dataset(digits, 50, 3)
    assert ds.images.shape == (50, 1600) and ds.sources.shape == (50, 2)
    np.testing.assert_array_equal(ds.offsets, position_to_offset(ds.positions))
    for i in range(50):
        expected = paste(digits.pixels[ds.digit_index[i]], ds.offsets[i]).ravel()
        np.testing.assert_array_equal(ds.images[i], expected)
    np.testing.assert_allclose(ds.mixing.A, 2 * np.eye(2) + 0.73)


def test_localization_dataset_deterministic():
    a = make_localization_dataset(synthetic_digits(), 1000, 11)
    b = make_localization_dataset(synthetic_digits(), 1000, 11)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.positions, b.positions)


def test_position_covariance():
    n = 100_000
    ds = make_localization_dataset(synthetic_digits(4), n, 0)
    Sigma = data_covariance(ds.mixing)
    emp = ds.positions.T @ ds.positions / n
    se = np.sqrt((np.outer(np.diag(Sigma), np.diag(Sigma)) + Sigma**2) / n)
    assert np.all(np.abs(emp - Sigma) < 3 * se)


def test_dataset_errors():
    with pytest.raises(ValueError):
        make_localization_dataset(IdxImages(1, 2, 2, np.zeros((1, 2, 2), np.uint8)), 5, 0)
    with pytest.raises(ValueError):
        make_localization_dataset(synthetic_digits(), 0, 0)


def test_dataset_save_load(tmp_path):
    ds = make_localization_dataset(synthetic_digits(), 20, 5)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    for name in ("images", "sources", "positions", "offsets", "digit_index"):
        assert np.array_equal(getattr(back, name), getattr(ds, name))
    assert np.array_equal(back.mixing.A, ds.mixing.A) and back.seed == 5
    assert (tmp_path / "images.bin").stat().st_size == 20 * 1600 * 8


def test_standardize_examples():
    out, mean, std = standardize(np.full((3, 4), 7.0))
    assert not out.any() and std == 1.0 and mean == 7.0
    out, mean, std = standardize(np.array([[0.0, 2.0], [2.0, 0.0]]))
    assert (mean, std) == (1.0, 1.0)
    np.testing.assert_array_equal(out, [[-1.0, 1.0], [1.0, -1.0]])


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50))
def test_standardize_properties(values):
    x = np.array(values)
    out, mean, std = standardize(x)
    np.testing.assert_allclose(out * std + mean, x, atol=1e-12 * max(1.0, np.abs(x).max()) * 10)
    if np.std(x) > 1e-6:
        assert abs(out.mean()) < 1e-10 and abs(out.std() - 1) < 1e-10
