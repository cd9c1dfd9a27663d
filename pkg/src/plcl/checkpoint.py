"""Binary checkpoint: magic, version, a JSON header, then named float64 blocks.

Layout (all integers little-endian)::

    b"PLCLCKPT" | u32 version | u64 header length | header JSON (UTF-8)
    u32 block count
    per block: u16 name length | name | u8 ndim | ndim x u64 shape | <f8 values

The header carries the config echo, the epoch counter, training history,
per-keyword errors and validation thresholds. Blocks hold model
parameters (``param/``), optimizer velocities (``velocity/``) and the
memory bank (``bank/``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PLCLCKPT"
VERSION = 1


@dataclass
class CheckpointData:
    header: dict
    blocks: dict = field(default_factory=dict)


def encode(ck: CheckpointData) -> bytes:
    head = json.dumps(ck.header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<IQ", VERSION, len(head)), head, struct.pack("<I", len(ck.blocks))]
    for name in sorted(ck.blocks):
        arr = np.asarray(ck.blocks[name], dtype="<f8")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, where: str):
        self.buf, self.pos, self.where = buf, 0, where

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.where}: truncated at byte {self.pos} (wanted {n} more)")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes, where: str = "checkpoint") -> CheckpointData:
    r = _Reader(buf, where)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{where}: not a checkpoint (bad magic)")
    version, hlen = r.unpack("<IQ")
    if version != VERSION:
        raise FormatError(f"{where}: checkpoint version {version}, expected {VERSION}")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{where}: corrupt header: {exc}") from None
    (count,) = r.unpack("<I")
    blocks = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(buf):
        raise FormatError(f"{where}: {len(buf) - r.pos} trailing bytes")
    return CheckpointData(header, blocks)


def save(ck: CheckpointData, path) -> None:
    Path(path).write_bytes(encode(ck))


def load(path) -> CheckpointData:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return decode(buf, str(path))
