"""Image file codecs: Netpbm P5/P6 and a PNG subset.

PNG support covers 8-bit grayscale and RGB, non-interlaced, all five
scanline filters on decode; encoding always uses filter 0.  Samples map
to [0, 1] via /255 on load and round-half-up * 255 on save; every
encode/decode roundtrip is lossless.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ImageFormatError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass
class ImageFile:
    width: int
    height: int
    channels: int  # 1 or 3
    samples: np.ndarray  # (h, w, channels) uint8
    format: str  # {"png", "ppm", "pgm"}


# ---------------------------------------------------------------------------
# Netpbm


def _read_pnm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(data):
        if data[pos : pos + 1].isspace():
            pos += 1
        elif data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError(f"pnm: expected token at byte offset {start}")
    return data[start:pos], pos


def decode_pnm(data: bytes) -> ImageFile:
    if data[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"pnm: bad signature {data[:2]!r} at offset 0")
    channels = 3 if data[:2] == b"P6" else 1
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_pnm_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise ImageFormatError(f"pnm: non-numeric header token at offset {pos}")
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"pnm: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    need = w * h * channels
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise ImageFormatError(
            f"pnm: raster truncated at offset {pos + len(raster)}, need {need} bytes"
        )
    samples = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels)
    return ImageFile(w, h, channels, samples.copy(), "ppm" if channels == 3 else "pgm")


def encode_pnm(img: ImageFile) -> bytes:
    magic = b"P6" if img.channels == 3 else b"P5"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.samples.astype(np.uint8).tobytes()


# ---------------------------------------------------------------------------
# PNG subset


def _png_chunk(kind: bytes, body: bytes) -> bytes:
    crc = zlib.crc32(kind + body) & 0xFFFFFFFF
    return struct.pack(">I", len(body)) + kind + body + struct.pack(">I", crc)


def encode_png(img: ImageFile) -> bytes:
    color_type = 2 if img.channels == 3 else 0
    ihdr = struct.pack(">IIBBBBB", img.width, img.height, 8, color_type, 0, 0, 0)
    raw = img.samples.astype(np.uint8)
    # filter 0 on every scanline
    scanlines = b"".join(
        b"\x00" + raw[y].tobytes() for y in range(img.height)
    )
    idat = zlib.compress(scanlines, 6)
    return (
        PNG_SIGNATURE
        + _png_chunk(b"IHDR", ihdr)
        + _png_chunk(b"IDAT", idat)
        + _png_chunk(b"IEND", b"")
    )


def _unfilter(kind: int, line: np.ndarray, prev: np.ndarray, bpp: int) -> np.ndarray:
    out = line.astype(np.int32)
    n = len(line)
    if kind == 0:
        pass
    elif kind == 1:  # Sub
        for i in range(bpp, n):
            out[i] = (out[i] + out[i - bpp]) & 0xFF
    elif kind == 2:  # Up
        out = (out + prev) & 0xFF
    elif kind == 3:  # Average
        for i in range(n):
            a = out[i - bpp] if i >= bpp else 0
            out[i] = (out[i] + (a + int(prev[i])) // 2) & 0xFF
    elif kind == 4:  # Paeth
        for i in range(n):
            a = int(out[i - bpp]) if i >= bpp else 0
            b = int(prev[i])
            c = int(prev[i - bpp]) if i >= bpp else 0
            p = a + b - c
            pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
            if pa <= pb and pa <= pc:
                pred = a
            elif pb <= pc:
                pred = b
            else:
                pred = c
            out[i] = (out[i] + pred) & 0xFF
    else:
        raise ImageFormatError(f"png: unknown scanline filter {kind}")
    return out.astype(np.uint8)


def decode_png(data: bytes) -> ImageFile:
    if data[:8] != PNG_SIGNATURE:
        raise ImageFormatError(f"png: bad signature at offset 0: {data[:8]!r}")
    pos = 8
    ihdr = None
    idat = b""
    while pos < len(data):
        if pos + 8 > len(data):
            raise ImageFormatError(f"png: truncated chunk header at offset {pos}")
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        kind = data[pos + 4 : pos + 8]
        body = data[pos + 8 : pos + 8 + length]
        if len(body) != length or pos + 12 + length > len(data):
            raise ImageFormatError(f"png: truncated {kind!r} chunk at offset {pos}")
        (crc,) = struct.unpack(">I", data[pos + 8 + length : pos + 12 + length])
        if zlib.crc32(kind + body) & 0xFFFFFFFF != crc:
            raise ImageFormatError(f"png: CRC mismatch in {kind!r} chunk at offset {pos}")
        if kind == b"IHDR":
            ihdr = body
        elif kind == b"IDAT":
            idat += body
        elif kind == b"IEND":
            break
        pos += 12 + length
    if ihdr is None:
        raise ImageFormatError("png: missing IHDR chunk")
    w, h, depth, color_type, comp, filt, interlace = struct.unpack(">IIBBBBB", ihdr)
    if depth != 8 or color_type not in (0, 2):
        raise ImageFormatError(
            f"png: only 8-bit gray/RGB supported (depth={depth}, color={color_type})"
        )
    if interlace:
        raise ImageFormatError("png: interlaced images are not supported")
    channels = 3 if color_type == 2 else 1
    try:
        raw = zlib.decompress(idat)
    except zlib.error as e:
        raise ImageFormatError(f"png: IDAT inflate failed: {e}")
    stride = w * channels
    if len(raw) != h * (stride + 1):
        raise ImageFormatError(
            f"png: decompressed size {len(raw)} != expected {h * (stride + 1)}"
        )
    samples = np.empty((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for y in range(h):
        off = y * (stride + 1)
        kind = raw[off]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=off + 1)
        prev = _unfilter(kind, line, prev, channels)
        samples[y] = prev
    return ImageFile(w, h, channels, samples.reshape(h, w, channels), "png")


# ---------------------------------------------------------------------------
# High-level helpers


def decode(data: bytes) -> ImageFile:
    if data[:8] == PNG_SIGNATURE:
        return decode_png(data)
    if data[:2] in (b"P5", b"P6"):
        return decode_pnm(data)
    raise ImageFormatError(f"unrecognized image signature {data[:8]!r}")


def encode(img: ImageFile, fmt: str | None = None) -> bytes:
    fmt = fmt or img.format
    if fmt == "png":
        return encode_png(img)
    if fmt in ("ppm", "pgm"):
        return encode_pnm(img)
    raise ImageFormatError(f"unsupported output format {fmt!r}")


def load_image(path) -> np.ndarray:
    """Read an image file as float32 (channels, h, w) in [0, 1]."""
    img = decode(Path(path).read_bytes())
    arr = img.samples.astype(np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(arr: np.ndarray, path) -> None:
    """Write a (channels, h, w) float array in [0, 1] as PNG/PPM/PGM by
    extension, with round-half-up quantization."""
    path = Path(path)
    c, h, w = arr.shape
    q = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    img = ImageFile(w, h, c, np.ascontiguousarray(q.transpose(1, 2, 0)), "png")
    ext = path.suffix.lower().lstrip(".")
    fmt = {"png": "png", "ppm": "ppm", "pgm": "pgm"}.get(ext)
    if fmt is None:
        raise ImageFormatError(f"unsupported output extension {path.suffix!r}")
    if fmt == "ppm" and c != 3:
        raise ImageFormatError("ppm requires 3 channels")
    if fmt == "pgm" and c != 1:
        raise ImageFormatError("pgm requires 1 channel")
    path.write_bytes(encode(img, fmt))
