"""
Checkpoint file format (little-endian):

    magic "RBSRW1"
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, float32 data
"""

import collections
import logging
import struct
import typing

import numpy as np

from .. import config
from ..utils import RbsrException, atomic_write_bytes
from .tensor import Parameter

logger = logging.getLogger("rbsr.nn.checkpoint")

NamedTensors = typing.Union[
    typing.Mapping[str, np.ndarray],
    typing.Iterable[typing.Union[Parameter, typing.Tuple[str, np.ndarray]]],
]


class CheckpointFormatException(RbsrException):
    pass


class TruncatedCheckpointException(CheckpointFormatException):
    pass


class DuplicateNameException(CheckpointFormatException):
    pass


def _entries(params: NamedTensors) -> typing.List[typing.Tuple[str, np.ndarray]]:
    items = params.items() if isinstance(params, typing.Mapping) else params
    entries = []
    seen = set()
    for item in items:
        name, value = (item.name, item.value) if isinstance(item, Parameter) else item
        if name in seen:
            raise DuplicateNameException(f"duplicate tensor name {name!r}")
        seen.add(name)
        entries.append((name, np.asarray(value)))
    return entries


def checkpoint_bytes(params: NamedTensors) -> bytes:
    entries = _entries(params)
    chunks = [config.CHECKPOINT_MAGIC, struct.pack("<I", len(entries))]
    for name, value in entries:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(chunks)


def checkpoint_write(params: NamedTensors, path: str):
    data = checkpoint_bytes(params)
    atomic_write_bytes(path, data)
    logger.info(f"Wrote checkpoint {path} ({len(data)} bytes)")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise TruncatedCheckpointException(
                f"checkpoint truncated at byte {len(self.data)}, needed {self.pos + count}"
            )
        chunk = self.data[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_parse(data: bytes) -> "collections.OrderedDict[str, np.ndarray]":
    magic = config.CHECKPOINT_MAGIC
    if data[: len(magic)] != magic:
        if len(data) < len(magic) and magic.startswith(data):
            raise TruncatedCheckpointException("checkpoint truncated inside the magic")
        raise CheckpointFormatException(f"bad magic {data[:len(magic)]!r}, expected {magic!r}")
    reader = _Reader(data)
    reader.take(len(magic))
    (count,) = reader.unpack("<I")
    tensors = collections.OrderedDict()
    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        name = reader.take(name_length).decode("utf-8")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I")
        n_values = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(reader.take(4 * n_values), dtype="<f4").astype(np.float32).reshape(dims)
        if name in tensors:
            raise DuplicateNameException(f"duplicate tensor name {name!r} in checkpoint")
        tensors[name] = values
    if reader.pos != len(data):
        raise CheckpointFormatException(f"{len(data) - reader.pos} unexpected trailing bytes")
    return tensors


def checkpoint_read(path: str) -> "collections.OrderedDict[str, np.ndarray]":
    with open(path, "rb") as file:
        return checkpoint_parse(file.read())
