"""Little-endian binary helpers with a CRC32 trailer."""

import struct
import zlib

import numpy as np

from .exceptions import ChecksumError, FormatError


class Writer:
    def __init__(self, magic: bytes, version: int):
        self._parts = [magic, struct.pack("<H", version)]

    def pack(self, fmt, *values):
        self._parts.append(struct.pack("<" + fmt, *values))

    def array(self, arr, dtype):
        self._parts.append(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def raw(self, data: bytes):
        self._parts.append(data)

    def getvalue(self) -> bytes:
        body = b"".join(self._parts)
        return body + struct.pack("<I", zlib.crc32(body))


class Reader:
    def __init__(self, data: bytes, magic: bytes, versions=(1,)):
        if len(data) < len(magic) + 6:
            raise FormatError("payload too short")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise ChecksumError("CRC32 mismatch")
        if body[: len(magic)] != magic:
            raise FormatError(f"bad magic {body[:len(magic)]!r}, expected {magic!r}")
        self._buf = body
        self._pos = len(magic)
        (self.version,) = self.unpack("H")
        if self.version not in versions:
            raise FormatError(f"unsupported format version {self.version}")

    def unpack(self, fmt):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        if self._pos + size > len(self._buf):
            raise FormatError("truncated payload")
        values = struct.unpack_from(fmt, self._buf, self._pos)
        self._pos += size
        return values

    def array(self, dtype, shape):
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(shape)) if len(shape) else 1
        size = count * dt.itemsize
        if self._pos + size > len(self._buf):
            raise FormatError("truncated payload")
        arr = np.frombuffer(self._buf, dtype=dt, count=count, offset=self._pos)
        self._pos += size
        return arr.astype(np.dtype(dtype), copy=True).reshape(shape)

    def raw(self, n):
        if self._pos + n > len(self._buf):
            raise FormatError("truncated payload")
        out = self._buf[self._pos:self._pos + n]
        self._pos += n
        return out

    def done(self):
        if self._pos != len(self._buf):
            raise FormatError(f"{len(self._buf) - self._pos} trailing bytes")
