"""Versioned binary container shared by classifier and detector files.

Layout: magic(4) | version u32 | descriptor-length u64 | descriptor JSON |
block count u32 | per block (length u64, raw little-endian bytes) |
blake2b-64 checksum of all preceding bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import ChecksumError, TruncatedFileError, VersionMismatchError

FORMAT_VERSION = 1
_CHECKSUM_BYTES = 8


def checksum64(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=_CHECKSUM_BYTES).digest()


def write_container(path, magic: bytes, descriptor: dict, blocks) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    desc = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += magic
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<Q", len(desc))
    out += desc
    out += struct.pack("<I", len(blocks))
    for block in blocks:
        arr = np.ascontiguousarray(block)
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        out += struct.pack("<Q", len(raw))
        out += raw
    out += checksum64(bytes(out))
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def read_container(path, magic: bytes):
    """Return (descriptor, list of raw block bytes); raises distinct load errors."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 + 4 + 8 + _CHECKSUM_BYTES:
        raise TruncatedFileError(f"{path}: too short to be a container")
    if raw[:4] != magic:
        raise VersionMismatchError(
            f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    body, stored = raw[:-_CHECKSUM_BYTES], raw[-_CHECKSUM_BYTES:]
    if checksum64(body) != stored:
        raise ChecksumError(f"{path}: checksum mismatch")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, "
                                   f"this build reads {FORMAT_VERSION}")
    pos = 8
    (desc_len,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if pos + desc_len > len(body):
        raise TruncatedFileError(f"{path}: descriptor extends past end of file")
    descriptor = json.loads(raw[pos:pos + desc_len].decode("utf-8"))
    pos += desc_len
    (n_blocks,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    blocks = []
    for _ in range(n_blocks):
        if pos + 8 > len(body):
            raise TruncatedFileError(f"{path}: block table extends past end of file")
        (blen,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        if pos + blen > len(body):
            raise TruncatedFileError(f"{path}: block data extends past end of file")
        blocks.append(raw[pos:pos + blen])
        pos += blen
    return descriptor, blocks


def block_to_array(raw: bytes, dtype: str, shape) -> np.ndarray:
    arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<"))
    return arr.reshape(shape).astype(np.dtype(dtype), copy=True)
