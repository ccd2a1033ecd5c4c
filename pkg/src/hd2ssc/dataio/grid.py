"""VoxelGrid container and the SSCV binary format.

SSCV layout (little endian):
    magic   4 bytes  b"SSCV"
    version u16      currently 1
    dims    3 x u32  H, W, Z
    labels  H*W*Z x u16, row-major (H outer, Z inner)
    valid   ceil(H*W*Z / 8) bytes, bit-packed MSB-first
"""
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import FormatError, LengthError

MAGIC = b"SSCV"
VERSION = 1
INVALID = 255
_HEADER = struct.Struct("<4sH3I")


@dataclass
class VoxelGrid:
    labels: np.ndarray   # (H, W, Z) uint16
    valid: np.ndarray    # (H, W, Z) bool

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if self.valid is None:
            self.valid = np.ones(self.labels.shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.labels.shape:
            raise FormatError("label and mask shapes differ")

    @property
    def shape(self):
        return self.labels.shape

    def effective_valid(self):
        return self.valid & (self.labels != INVALID)

    def __eq__(self, other):
        return (isinstance(other, VoxelGrid) and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.valid, other.valid))


def pack_mask(mask):
    return np.packbits(np.asarray(mask, dtype=bool).reshape(-1), bitorder="big").tobytes()


def unpack_mask(buf, count):
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="big")
    return bits[:count].astype(bool)


def encode_sscv(grid):
    H, W, Z = grid.shape
    for d in grid.shape:
        if d >= 2 ** 32:
            raise FormatError("grid extent does not fit in 32 bits")
    return (_HEADER.pack(MAGIC, VERSION, H, W, Z)
            + grid.labels.astype("<u2").tobytes()
            + pack_mask(grid.valid))


def decode_sscv(buf):
    buf = bytes(buf)
    if len(buf) < _HEADER.size:
        raise LengthError("SSCV header", _HEADER.size, len(buf))
    magic, version, H, W, Z = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported SSCV version {version}")
    n = H * W * Z
    expected = _HEADER.size + 2 * n + (n + 7) // 8
    if len(buf) != expected:
        raise LengthError("SSCV file", expected, len(buf))
    off = _HEADER.size
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=off).reshape(H, W, Z)
    valid = unpack_mask(buf[off + 2 * n:], n).reshape(H, W, Z)
    return VoxelGrid(labels.astype(np.uint16), valid)


def write_sscv(grid, path):
    with open(path, "wb") as f:
        f.write(encode_sscv(grid))


def read_sscv(path):
    with open(path, "rb") as f:
        return decode_sscv(f.read())
