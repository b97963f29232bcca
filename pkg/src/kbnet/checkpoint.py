"""Versioned binary checkpoint format.

Layout (all integers little-endian):

    bytes 0..3    magic "KBNT"
    payload:
        u32       format version (currently 1)
        u32       config JSON length, followed by that many UTF-8 bytes
        u32       parameter count
        per parameter, in registry order:
            u16   name length, followed by UTF-8 name
            u8    rank
            u32*  dims
            f32*  raw little-endian single-precision values
    trailer:
        u64       checksum of the payload (BLAKE2b, 8-byte digest)

Roundtrips are bit-exact; magic, version, and checksum are validated on
load with distinct error types.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct

import numpy as np

from .errors import BadMagicError, ChecksumError, VersionError
from .net import NetConfig, NetParams, build, named_params

MAGIC = b"KBNT"
VERSION = 1


def _checksum(payload: bytes) -> int:
    return int.from_bytes(
        hashlib.blake2b(payload, digest_size=8).digest(), "little"
    )


def config_to_json(cfg: NetConfig) -> str:
    d = dataclasses.asdict(cfg)
    d["encoder_blocks"] = list(d["encoder_blocks"])
    d["decoder_blocks"] = list(d["decoder_blocks"])
    return json.dumps(d, sort_keys=True)


def config_from_json(s: str) -> NetConfig:
    d = json.loads(s)
    d["encoder_blocks"] = tuple(d["encoder_blocks"])
    d["decoder_blocks"] = tuple(d["decoder_blocks"])
    return NetConfig(**d)


def serialize(params: NetParams, cfg: NetConfig) -> bytes:
    chunks = [struct.pack("<I", VERSION)]
    cfg_bytes = config_to_json(cfg).encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg_bytes)))
    chunks.append(cfg_bytes)
    entries = list(named_params(params))
    chunks.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(
            np.ascontiguousarray(arr, dtype="<f4").tobytes()
        )
    payload = b"".join(chunks)
    return MAGIC + payload + struct.pack("<Q", _checksum(payload))


def save_checkpoint(params: NetParams, cfg: NetConfig, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize(params, cfg))


def deserialize(blob: bytes) -> tuple[NetParams, NetConfig]:
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 4 + 4 + 8:
        raise ChecksumError(
            f"file truncated at {len(blob)} bytes; payload region [4, ...] incomplete"
        )
    payload = blob[4:-8]
    (stored,) = struct.unpack("<Q", blob[-8:])
    if _checksum(payload) != stored:
        raise ChecksumError(
            f"checksum mismatch over payload region bytes [4, {4 + len(payload)})"
        )
    off = 0

    def take(n):
        nonlocal off
        chunk = payload[off : off + n]
        if len(chunk) != n:
            raise ChecksumError(f"payload truncated at offset {4 + off}")
        off += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    cfg = config_from_json(take(cfg_len).decode("utf-8"))
    (n_params,) = struct.unpack("<I", take(4))

    loaded: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        loaded[name] = data.copy()

    # rebuild the structure from the config and fill arrays by name
    params = build(cfg, seed=0)
    names = dict(named_params(params))
    if set(names) != set(loaded):
        missing = sorted(set(names) ^ set(loaded))
        raise ChecksumError(f"parameter registry mismatch: {missing[:5]}")
    for name, arr in names.items():
        if arr.shape != loaded[name].shape:
            raise ChecksumError(
                f"shape mismatch for {name}: {arr.shape} vs {loaded[name].shape}"
            )
        arr[...] = loaded[name]
    return params, cfg


def load_checkpoint(path) -> tuple[NetParams, NetConfig]:
    with open(path, "rb") as f:
        return deserialize(f.read())
