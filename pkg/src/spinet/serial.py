"""Low-level binary and JSON helpers shared by the checkpoint and sample formats."""

import json
import struct

from .errors import TruncationError


def canonical_json(obj) -> str:
    """Serialize with sorted keys and no whitespace so equal objects give equal bytes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncationError(f"truncated while reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def write_u16(fh, v: int) -> None:
    fh.write(struct.pack("<H", v))


def write_u32(fh, v: int) -> None:
    fh.write(struct.pack("<I", v))


def write_u64(fh, v: int) -> None:
    fh.write(struct.pack("<Q", v))


def read_u16(fh, what: str) -> int:
    return struct.unpack("<H", read_exact(fh, 2, what))[0]


def read_u32(fh, what: str) -> int:
    return struct.unpack("<I", read_exact(fh, 4, what))[0]


def read_u64(fh, what: str) -> int:
    return struct.unpack("<Q", read_exact(fh, 8, what))[0]
