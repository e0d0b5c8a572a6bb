"""Shared helpers for the little-endian binary formats."""

import struct

from .errors import BadMagic, TruncatedFile, VersionMismatch

FORMAT_VERSION = 1


def read_header(data: bytes, magic: bytes, path, version=FORMAT_VERSION) -> int:
    """Validate magic + u32 version; returns the offset after the header."""
    if len(data) < 8:
        raise TruncatedFile(f"{path}: file shorter than its header")
    if data[:4] != magic:
        raise BadMagic(f"{path}: expected magic {magic!r}, found {data[:4]!r}")
    (found,) = struct.unpack_from("<I", data, 4)
    if found != version:
        raise VersionMismatch(f"{path}: version {found}, expected {version}")
    return 8


def take(data: bytes, offset: int, n: int, path):
    if offset + n > len(data):
        raise TruncatedFile(f"{path}: needs {offset + n} bytes, has {len(data)}")
    return data[offset:offset + n], offset + n
