import struct
import zlib

import numpy as np
import pytest

from kbnet import imgio
from kbnet.errors import ImageFormatError


def _random_image(rng, h, w, c):
    return imgio.ImageFile(
        width=w, height=h, channels=c,
        samples=rng.integers(0, 256, size=(h, w, c), dtype=np.uint8),
        format="png" if c == 3 else "pgm",
    )


def test_p6_header_literal_decodes():
    raster = bytes(range(45))
    data = b"P6\n3 5\n255\n" + raster
    img = imgio.decode(data)
    assert (img.width, img.height, img.channels) == (3, 5, 3)
    assert img.samples.tobytes() == raster


def test_pnm_comments_and_whitespace():
    data = b"P5 # gray\n# full-line comment\n2 2\n255\n" + bytes([0, 64, 128, 255])
    img = imgio.decode(data)
    assert img.channels == 1 and img.samples.ravel().tolist() == [0, 64, 128, 255]


def test_pnm_roundtrip():
    rng = np.random.default_rng(0)
    for c in (1, 3):
        img = _random_image(rng, 5, 3, c)
        back = imgio.decode(imgio.encode_pnm(img))
        assert np.array_equal(back.samples, img.samples)


def test_pnm_truncated_raster():
    with pytest.raises(ImageFormatError, match="truncated"):
        imgio.decode(b"P6\n3 5\n255\n" + bytes(10))


def test_pnm_bad_maxval():
    with pytest.raises(ImageFormatError, match="maxval"):
        imgio.decode(b"P6\n3 5\n65535\n" + bytes(90))


def test_png_roundtrip_rgb_and_gray():
    rng = np.random.default_rng(1)
    for c in (1, 3):
        img = _random_image(rng, 7, 4, c)
        back = imgio.decode_png(imgio.encode_png(img))
        assert back.channels == c
        assert np.array_equal(back.samples, img.samples)


def _png_with_filters(samples, filters):
    """Hand-assemble a PNG applying the given per-scanline filter types."""
    h, w, c = samples.shape
    raw = samples.astype(np.int32)
    lines = []
    prev = np.zeros(w * c, dtype=np.int32)
    for y in range(h):
        line = raw[y].reshape(-1)
        f = filters[y % len(filters)]
        if f == 0:
            enc = line
        elif f == 1:  # Sub
            shifted = np.concatenate([np.zeros(c, np.int32), line[:-c]])
            enc = (line - shifted) & 0xFF
        elif f == 2:  # Up
            enc = (line - prev) & 0xFF
        elif f == 3:  # Average
            enc = line.copy()
            for i in range(len(line)):
                a = line[i - c] if i >= c else 0
                enc[i] = (line[i] - (a + prev[i]) // 2) & 0xFF
        elif f == 4:  # Paeth
            enc = line.copy()
            for i in range(len(line)):
                a = int(line[i - c]) if i >= c else 0
                b = int(prev[i])
                cc = int(prev[i - c]) if i >= c else 0
                p = a + b - cc
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - cc)
                pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else cc)
                enc[i] = (line[i] - pred) & 0xFF
        lines.append(bytes([f]) + bytes(enc.astype(np.uint8)))
        prev = line
    color = 2 if c == 3 else 0
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color, 0, 0, 0)
    idat = zlib.compress(b"".join(lines))

    def chunk(kind, body):
        crc = zlib.crc32(kind + body) & 0xFFFFFFFF
        return struct.pack(">I", len(body)) + kind + body + struct.pack(">I", crc)

    return (imgio.PNG_SIGNATURE + chunk(b"IHDR", ihdr) + chunk(b"IDAT", idat)
            + chunk(b"IEND", b""))


@pytest.mark.parametrize("filters", [[1], [2], [3], [4], [0, 1, 2, 3, 4]])
def test_png_decodes_all_filter_types(filters):
    rng = np.random.default_rng(sum(filters) + 5)
    samples = rng.integers(0, 256, size=(6, 5, 3), dtype=np.uint8)
    img = imgio.decode_png(_png_with_filters(samples, filters))
    assert np.array_equal(img.samples, samples)


def test_png_truncated_chunk():
    rng = np.random.default_rng(2)
    data = imgio.encode_png(_random_image(rng, 4, 4, 3))
    with pytest.raises(ImageFormatError):
        imgio.decode(data[: len(data) // 2])


def test_png_crc_mismatch():
    rng = np.random.default_rng(3)
    data = bytearray(imgio.encode_png(_random_image(rng, 4, 4, 3)))
    data[40] ^= 0xFF  # inside the IDAT body
    with pytest.raises(ImageFormatError, match="CRC|inflate|size"):
        imgio.decode(bytes(data))


def test_unknown_signature():
    with pytest.raises(ImageFormatError, match="signature"):
        imgio.decode(b"GIF89a....")


def test_load_save_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    arr = (rng.integers(0, 256, size=(3, 6, 5)) / 255.0).astype(np.float32)
    for ext in ("png", "ppm"):
        path = tmp_path / f"img.{ext}"
        imgio.save_image(arr, path)
        back = imgio.load_image(path)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)


def test_save_image_quantizes_round_half_up(tmp_path):
    arr = np.array([[[0.0, 1.0 / 510.0, 1.0]]], dtype=np.float32)  # (1,1,3)
    path = tmp_path / "q.pgm"
    imgio.save_image(arr.reshape(1, 1, 3), path)
    img = imgio.decode(path.read_bytes())
    assert img.samples.ravel().tolist() == [0, 1, 255]


def test_save_image_extension_validation(tmp_path):
    arr = np.zeros((3, 4, 4), dtype=np.float32)
    with pytest.raises(ImageFormatError):
        imgio.save_image(arr, tmp_path / "img.bmp")
    with pytest.raises(ImageFormatError):
        imgio.save_image(arr, tmp_path / "img.pgm")  # pgm needs 1 channel
