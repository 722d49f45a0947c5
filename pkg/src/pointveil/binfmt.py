"""Checksummed little-endian containers shared by the model, key and ciphertext files.

Layout: 4-byte magic, u16 version, body, u32 CRC-32 of every prior byte.
"""
from __future__ import annotations

import struct
import zlib

from .errors import ChecksumError, FormatError, MissingFileError, TruncatedError, VersionError


def seal(magic: bytes, version: int, body: bytes) -> bytes:
    data = magic + struct.pack("<H", version) + body
    return data + struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF)


def checksum_ok(data: bytes) -> bool:
    return len(data) >= 4 and zlib.crc32(data[:-4]) & 0xFFFFFFFF == struct.unpack("<I", data[-4:])[0]


def unseal(data: bytes, magic: bytes, version: int, expected_len=None) -> memoryview:
    """Validate a container and return its body.

    ``expected_len(body_prefix)`` may compute the full file size from the
    header so truncation is reported as such rather than as a checksum
    failure; it returns None when the prefix is too short to tell.
    """
    if len(data) < 4 or data[:4] != magic:
        if len(data) < 4 and magic.startswith(data):
            raise TruncatedError("file ends inside the magic number")
        raise FormatError(f"bad magic: expected {magic!r}, found {bytes(data[:4])!r}")
    if len(data) < 10:
        raise TruncatedError("file ends inside the header")
    found = struct.unpack_from("<H", data, 4)[0]
    ok = checksum_ok(data)
    if found != version:
        if ok:
            raise VersionError(f"unsupported format version {found} (this build reads {version})")
        raise ChecksumError("checksum mismatch")
    if expected_len is not None:
        want = expected_len(memoryview(data)[6:])
        if want is None or len(data) < want:
            raise TruncatedError(f"file is truncated: {len(data)} bytes, header implies {want}")
        if len(data) > want and ok:
            raise FormatError(f"trailing bytes: {len(data)} bytes, header implies {want}")
    if not ok:
        raise ChecksumError("checksum mismatch")
    return memoryview(data)[6:-4]


def read_file(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError:
        raise MissingFileError(f"no such file: {path}") from None


def write_file(path, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)
