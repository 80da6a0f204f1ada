"""Binary block format shared by dataset, checkpoint, mask and trace files.

Layout of every file: 4-byte magic, version u16, a sequence of fields
(integers little-endian, strings u16-length-prefixed UTF-8, tensors as
dtype u8 / ndim u8 / dims u32 / row-major payload), then a trailing CRC32
of all preceding bytes.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

DTYPE_F64 = 0
DTYPE_I32 = 1

_NP_DTYPES = {DTYPE_F64: np.dtype("<f8"), DTYPE_I32: np.dtype("<i4")}


class FileFormatError(ValueError):
    """Base error for malformed container files."""


class BadMagicError(FileFormatError):
    pass


class VersionMismatchError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    """File ends (or a length field points) past the available bytes."""

    def __init__(self, offset: int, wanted: int, available: int):
        self.offset = offset
        super().__init__(
            f"truncated/corrupt file: need {wanted} bytes at offset {offset}, "
            f"only {available} available"
        )


class ChecksumError(FileFormatError):
    pass


class BlockWriter:
    """Accumulates fields; `to_bytes` appends the CRC32 trailer."""

    def __init__(self, magic: bytes, version: int):
        if len(magic) != 4:
            raise ValueError("magic must be 4 bytes")
        self._parts = [magic, struct.pack("<H", version)]

    def u8(self, v: int) -> None:
        self._parts.append(struct.pack("<B", v))

    def u16(self, v: int) -> None:
        self._parts.append(struct.pack("<H", v))

    def u32(self, v: int) -> None:
        self._parts.append(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self._parts.append(struct.pack("<Q", v))

    def f64(self, v: float) -> None:
        self._parts.append(struct.pack("<d", v))

    def string(self, s: str) -> None:
        raw = s.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError("string too long for u16 length prefix")
        self.u16(len(raw))
        self._parts.append(raw)

    def tensor(self, arr: np.ndarray) -> None:
        if arr.dtype == np.float64:
            code = DTYPE_F64
        elif arr.dtype == np.int32:
            code = DTYPE_I32
        else:
            raise ValueError(f"unsupported tensor dtype {arr.dtype}; use float64 or int32")
        if arr.ndim > 0xFF:
            raise ValueError("too many dimensions")
        self.u8(code)
        self.u8(arr.ndim)
        for d in arr.shape:
            self.u32(d)
        self._parts.append(np.ascontiguousarray(arr, dtype=_NP_DTYPES[code]).tobytes())

    def to_bytes(self) -> bytes:
        body = b"".join(self._parts)
        return body + struct.pack("<I", zlib.crc32(body))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


class BlockReader:
    """Validates magic and version up front, CRC32 when `finish` is called.

    Field reads running past the end raise TruncatedFileError with the
    offending offset, so a cut-off file is rejected before any state is built.
    """

    def __init__(self, data: bytes, magic: bytes, version: int):
        if len(data) < 4:
            raise TruncatedFileError(0, 4, len(data))
        if data[:4] != magic:
            raise BadMagicError(f"bad magic {data[:4]!r}, expected {magic!r}")
        if len(data) < 10:
            raise TruncatedFileError(4, 6, len(data) - 4)
        (got_version,) = struct.unpack_from("<H", data, 4)
        if got_version != version:
            raise VersionMismatchError(f"format version {got_version}, expected {version}")
        self._data = data
        self._pos = 6
        self._end = len(data) - 4  # CRC trailer excluded from field area

    def _take(self, n: int) -> bytes:
        if self._pos + n > self._end:
            raise TruncatedFileError(self._pos, n, self._end - self._pos)
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def string(self) -> str:
        n = self.u16()
        return self._take(n).decode("utf-8")

    def tensor(self) -> np.ndarray:
        code = self.u8()
        if code not in _NP_DTYPES:
            raise FileFormatError(f"unknown tensor dtype code {code} at offset {self._pos - 1}")
        ndim = self.u8()
        shape = tuple(self.u32() for _ in range(ndim))
        count = 1
        for d in shape:
            count *= d
        raw = self._take(count * _NP_DTYPES[code].itemsize)
        arr = np.frombuffer(raw, dtype=_NP_DTYPES[code]).reshape(shape)
        return arr.astype(arr.dtype.newbyteorder("="), copy=True)

    def finish(self) -> None:
        """Require all field bytes consumed and the CRC trailer to match."""
        if self._pos != self._end:
            raise FileFormatError(
                f"trailing bytes: parsing stopped at offset {self._pos}, "
                f"field area ends at {self._end}"
            )
        (stored,) = struct.unpack_from("<I", self._data, self._end)
        actual = zlib.crc32(self._data[: self._end])
        if stored != actual:
            raise ChecksumError(f"CRC32 mismatch: stored {stored:#010x}, computed {actual:#010x}")


def read_file(path, magic: bytes, version: int) -> BlockReader:
    with open(path, "rb") as fh:
        return BlockReader(fh.read(), magic, version)
