#!/usr/bin/env python3
"""
Tests for image types, netpbm codecs, CLAHE and channel histograms.
"""

import numpy as np
import pytest

from rvm_audit.imagecore import (ChannelHistogram, ColorImage, ExcessPayloadError, GeometryError, GrayImage,
                                 HeaderError, MaxvalError, TruncatedPayloadError, WrongFormatError,
                                 channel_histograms, clahe, clahe_color, read_color, read_gray, to_gray,
                                 write_color, write_gray)


def test_read_gray_row_major(tmp_path):
    path = tmp_path / 'a.pgm'
    path.write_bytes(b'P5\n2 2\n255\n' + bytes([0, 255, 128, 7]))
    img = read_gray(path)
    assert (img.width, img.height) == (2, 2)
    assert img.pixels.tolist() == [[0, 255], [128, 7]]


def test_write_gray_canonical_bytes(tmp_path):
    path = tmp_path / 'one.pgm'
    write_gray(GrayImage.zeros(1, 1), path)
    data = path.read_bytes()
    assert data == b'P5\n1 1\n255\n\x00'
    assert len(data) == 13


def test_gray_file_identity(tmp_path):
    rng = np.random.default_rng(3)
    src = tmp_path / 'src.pgm'
    src.write_bytes(b'P5\n7 5\n255\n' + rng.integers(0, 256, 35, dtype=np.uint8).tobytes())
    dst = tmp_path / 'dst.pgm'
    write_gray(read_gray(src), dst)
    assert dst.read_bytes() == src.read_bytes()


def test_header_comments_are_skipped(tmp_path):
    path = tmp_path / 'c.pgm'
    path.write_bytes(b'P5 # comment\n2 # width done\n1\n255\n' + bytes([9, 10]))
    assert read_gray(path).pixels.tolist() == [[9, 10]]


@pytest.mark.parametrize('data, error', [
    (b'P5\n2 2\n255\n' + bytes(3), TruncatedPayloadError),
    (b'P5\n2 2\n255\n' + bytes(5), ExcessPayloadError),
    (b'P5\n2 2\n65535\n' + bytes(8), MaxvalError),
    (b'P5\n2 x\n255\n' + bytes(4), HeaderError),
    (b'P5\n2', HeaderError),
    (b'GIF89a', HeaderError),
    (b'P6\n1 1\n255\n' + bytes(3), WrongFormatError),
])
def test_read_gray_errors(tmp_path, data, error):
    path = tmp_path / 'bad.pgm'
    path.write_bytes(data)
    with pytest.raises(error):
        read_gray(path)


def test_read_color_planar(tmp_path):
    path = tmp_path / 'red.ppm'
    path.write_bytes(b'P6\n1 1\n255\n' + bytes([255, 0, 0]))
    img = read_color(path)
    assert img.red.tolist() == [[255]]
    assert img.green.tolist() == [[0]]
    assert img.blue.tolist() == [[0]]


def test_color_file_identity(tmp_path):
    rng = np.random.default_rng(4)
    src = tmp_path / 'src.ppm'
    src.write_bytes(b'P6\n3 4\n255\n' + rng.integers(0, 256, 36, dtype=np.uint8).tobytes())
    dst = tmp_path / 'dst.ppm'
    write_color(read_color(src), dst)
    assert dst.read_bytes() == src.read_bytes()


def test_read_color_rejects_pgm(tmp_path):
    path = tmp_path / 'gray.pgm'
    write_gray(GrayImage.zeros(2, 2), path)
    with pytest.raises(WrongFormatError):
        read_color(path)


def test_write_to_missing_directory_fails(tmp_path):
    with pytest.raises(OSError):
        write_gray(GrayImage.zeros(1, 1), tmp_path / 'nope' / 'x.pgm')


def test_gray_image_rejects_out_of_range():
    with pytest.raises(ValueError):
        GrayImage(np.array([[256]]))
    with pytest.raises(ValueError):
        GrayImage.from_values(2, 2, [1, 2, 3])


def test_to_gray_luma():
    def pixel(r, g, b):
        return to_gray(ColorImage([[r]], [[g]], [[b]])).pixels[0, 0]

    assert pixel(255, 255, 255) == 255
    assert pixel(0, 0, 0) == 0
    assert pixel(255, 0, 0) == 76


def test_to_gray_monotone_in_each_channel():
    rng = np.random.default_rng(5)
    planes = rng.integers(0, 255, size=(3, 10, 10))
    base = to_gray(ColorImage.from_planes(planes)).pixels.astype(int)
    for c in range(3):
        bumped = planes.copy()
        bumped[c] += 1
        assert (to_gray(ColorImage.from_planes(bumped)).pixels.astype(int) >= base).all()


def test_clahe_constant_image_stays_constant():
    img = GrayImage(np.full((40, 56), 93))
    out = clahe(img, tiles=(8, 8), clip_limit=0.01)
    assert np.unique(out.pixels).size == 1


def reference_equalize(pix):
    """Plain histogram equalization from sorted ranks"""
    flat = np.sort(pix.ravel())
    n = flat.size
    below_min = np.searchsorted(flat, flat[0], side='right')
    out = np.empty(pix.shape, dtype=np.int64)
    for (r, c), v in np.ndenumerate(pix):
        rank = np.searchsorted(flat, v, side='right')
        out[r, c] = np.floor(255 * (rank - below_min) / (n - below_min) + 0.5)
    return out


def test_clahe_single_tile_is_histogram_equalization():
    rng = np.random.default_rng(11)
    pix = rng.integers(0, 256, size=(8, 8))
    out = clahe(GrayImage(pix), tiles=(1, 1), clip_limit=1.0)
    assert np.array_equal(out.pixels.astype(np.int64), reference_equalize(pix))
    assert out.pixels.min() == 0 and out.pixels.max() == 255


def test_clahe_two_valued_image_maps_to_extremes():
    pix = np.full((8, 8), 90, dtype=np.uint8)
    pix[:, 4:] = 170
    out = clahe(GrayImage(pix), tiles=(1, 1), clip_limit=1.0).pixels
    assert (out[:, :4] == 0).all() and (out[:, 4:] == 255).all()

    pix[:, :4] = 0
    pix[:, 4:] = 255
    out = clahe(GrayImage(pix), tiles=(1, 1), clip_limit=1.0).pixels
    assert set(np.unique(out)) == {0, 255}
    assert (out[:, :4] == 0).all()


def test_clahe_preserves_order_within_one_tile():
    rng = np.random.default_rng(2)
    pix = rng.integers(0, 256, size=(16, 16))
    out = clahe(GrayImage(pix), tiles=(1, 1), clip_limit=0.05).pixels.astype(int)
    order = np.argsort(pix.ravel(), kind='stable')
    assert (np.diff(out.ravel()[order]) >= 0).all()


def test_clahe_output_in_range_on_uneven_grid():
    rng = np.random.default_rng(8)
    out = clahe(GrayImage(rng.integers(0, 256, size=(37, 53))), tiles=(4, 6), clip_limit=0.02)
    assert out.pixels.shape == (37, 53)


def test_clahe_geometry_errors():
    with pytest.raises(GeometryError):
        clahe(GrayImage.zeros(4, 4), tiles=(8, 8))
    with pytest.raises(GeometryError):
        clahe(GrayImage.zeros(16, 16), tiles=(0, 2))
    with pytest.raises(ValueError):
        clahe(GrayImage.zeros(16, 16), tiles=(2, 2), clip_limit=0)


def test_clahe_color_shape_and_gray_input():
    img = ColorImage.from_planes(np.full((3, 24, 24), 120))
    out = clahe_color(img, tiles=(2, 2))
    assert (out.width, out.height) == (24, 24)
    assert np.array_equal(out.red, out.green) and np.array_equal(out.green, out.blue)


def test_channel_histograms_single_pixel():
    red, green, blue = channel_histograms([ColorImage([[10]], [[20]], [[30]])], 'A')
    assert red.bin_counts[10] == 1 and red.total == 1
    assert green.bin_counts[20] == 1 and blue.bin_counts[30] == 1
    assert red.group_label == 'A' and red.channel == 'red'


def test_channel_histograms_additive():
    rng = np.random.default_rng(1)
    img = ColorImage.from_planes(rng.integers(0, 256, size=(3, 6, 5)))
    single = channel_histograms([img], 'A')
    double = channel_histograms([img, img], 'A')
    for one, two in zip(single, double):
        assert np.array_equal(two.bin_counts, 2 * one.bin_counts)
        assert two.total == 2 * 30


def test_channel_histograms_empty_input():
    with pytest.raises(ValueError):
        channel_histograms([], 'A')


def test_channel_histogram_validates_bins():
    with pytest.raises(ValueError):
        ChannelHistogram('red', 'A', [1, 2, 3])
    assert ChannelHistogram('red', 'A', np.eye(256, dtype=int)[5]).mean_bin() == 5.0
