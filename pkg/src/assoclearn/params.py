"""Named parameter collections and the ``ACLS`` binary checkpoint container.

Container layout (all integers little-endian)::

    b"ACLS"  version:u16  count:u32
    count x [ name_len:u16  name:utf-8  rank:u8  dims:u32*rank  payload:f64*prod(dims) ]
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"ACLS"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamSet(Mapping):
    """Ordered ``name -> float64 array`` mapping with unique names.

    Iteration order is insertion order, which is also the order used by
    :meth:`flatten` and by the checkpoint writer.
    """

    def __init__(self, items=()):
        self._arrays: dict[str, np.ndarray] = {}
        pairs = items.items() if isinstance(items, Mapping) else items
        for name, value in pairs:
            if name in self._arrays:
                raise ValueError(f"duplicate parameter name {name!r}")
            data = value.data if hasattr(value, "data") and not isinstance(value, np.ndarray) else value
            self._arrays[name] = np.array(data, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} tensors, {self.num_values()} values)"

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamSet) or list(self) != list(other):
            return False
        return all(self[k].shape == other[k].shape and np.array_equal(self[k], other[k]) for k in self)

    __hash__ = None

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._arrays.items()}

    def num_values(self) -> int:
        return int(sum(v.size for v in self._arrays.values()))

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self._arrays.items())

    def flatten(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([v.reshape(-1) for v in self._arrays.values()])

    def unflatten(self, vector: np.ndarray) -> "ParamSet":
        """A ParamSet with this one's names and shapes filled from ``vector``."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.num_values(),):
            raise ValueError(f"expected a vector of length {self.num_values()}, got {vector.shape}")
        out, pos = [], 0
        for name, v in self._arrays.items():
            out.append((name, vector[pos:pos + v.size].reshape(v.shape).copy()))
            pos += v.size
        return ParamSet(out)

    def to_bytes(self) -> bytes:
        return encode_container(self._arrays.items())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamSet":
        return cls(decode_container(blob))

    def save(self, path) -> int:
        blob = self.to_bytes()
        Path(path).write_bytes(blob)
        return len(blob)

    @classmethod
    def load(cls, path) -> "ParamSet":
        return cls.from_bytes(Path(path).read_bytes())


def encode_container(entries) -> bytes:
    entries = list(entries)
    parts = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for name, value in entries:
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"rank {arr.ndim} too large for {name!r}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def container_size(shapes: Mapping[str, tuple[int, ...]]) -> int:
    """Exact byte length of the container holding tensors of these shapes."""
    size = len(MAGIC) + 6
    for name, shape in shapes.items():
        size += 2 + len(name.encode("utf-8")) + 1 + 4 * len(shape) + 8 * int(np.prod(shape, dtype=np.int64))
    return size


def decode_container(blob: bytes) -> list[tuple[str, np.ndarray]]:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated container: need {n} bytes for {what} at offset {pos}, "
                                  f"only {len(view) - pos} left")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic at offset 0: not an ACLS container")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version} at offset 4")
    out = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name!r}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        n = int(np.prod(dims, dtype=np.int64))
        payload = take(8 * n, f"payload of {name!r}")
        out.append((name, np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes at offset {pos}")
    return out
