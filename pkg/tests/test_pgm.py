"""Binary PGM I/O: lossless 8-bit round trip, bounded quantization."""

import numpy as np
import pytest

from psdt.pgm import quantize, read_pgm, read_pgm_bytes, write_pgm


def test_uint8_round_trip_lossless(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(12, 17), dtype=np.uint8)
    path = tmp_path / "x.pgm"
    write_pgm(path, img)
    assert np.array_equal(read_pgm_bytes(path), img)


def test_float_quantization_error_bounded(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, size=(16, 16))
    path = tmp_path / "x.pgm"
    write_pgm(path, img)
    back = read_pgm(path)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_quantize_clips_and_rounds(tmp_path):
    img = np.array([[-0.5, 0.0, 0.5, 1.0, 2.0]])
    q = quantize(img)
    assert q.tolist() == [[0, 0, 128, 255, 255]]


def test_header_format(tmp_path):
    path = tmp_path / "x.pgm"
    write_pgm(path, np.zeros((3, 5)))
    data = path.read_bytes()
    assert data.startswith(b"P5\n5 3\n255\n")
    assert len(data) == len(b"P5\n5 3\n255\n") + 15


def test_comment_in_header_tolerated(tmp_path):
    path = tmp_path / "x.pgm"
    pixels = bytes(range(6))
    path.write_bytes(b"P5\n# made elsewhere\n3 2\n255\n" + pixels)
    img = read_pgm_bytes(path)
    assert img.shape == (2, 3)
    assert img.ravel().tolist() == list(range(6))


def test_non_p5_rejected(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(ValueError):
        read_pgm_bytes(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(ValueError):
        read_pgm_bytes(path)


def test_non_2d_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))
