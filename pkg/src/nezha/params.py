"""Named parameter tensors with gradient buffers, and the checkpoint container.

Checkpoint layout (all integers 32-bit little-endian)::

    b"NZHA" | version | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | float64 LE data
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

MAGIC = b"NZHA"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray | None = None
    v: np.ndarray | None = None


class ParamStore:
    """Ordered mapping of parameter name to :class:`Param`."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: OrderedDict[str, Param] = OrderedDict()

    def add(self, name: str, value) -> np.ndarray:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=self.dtype)
        self._params[name] = Param(value, np.zeros_like(value))
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def param(self, name: str) -> Param:
        return self._params[name]

    def grad(self, name: str) -> np.ndarray:
        return self._params[name].grad

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self._params.items()}

    def set_values(self, values: Mapping[str, np.ndarray]) -> None:
        """Overwrite every parameter in place after checking all shapes first."""
        missing = [k for k in self._params if k not in values]
        if missing:
            raise CheckpointShapeError(f"checkpoint lacks tensor {missing[0]!r}")
        for k, p in self._params.items():
            if tuple(values[k].shape) != p.value.shape:
                raise CheckpointShapeError(
                    f"tensor {k!r}: checkpoint shape {tuple(values[k].shape)} "
                    f"!= model shape {p.value.shape}"
                )
        for k, p in self._params.items():
            p.value[...] = values[k]

    def clone(self) -> "ParamStore":
        out = ParamStore(self.dtype)
        for k, p in self._params.items():
            out.add(k, p.value.copy())
        return out


def save_checkpoint(params, path) -> None:
    values = params.values() if isinstance(params, ParamStore) else dict(params)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(values))]
    for name, arr in values.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    """Parse a checkpoint file into name -> float64 array."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointTruncatedError(f"{path}: truncated at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims)
        out[name] = data.astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def load_checkpoint(path, into: ParamStore | None = None) -> ParamStore:
    """Load a checkpoint, either into an existing store (shape-checked) or a new one."""
    values = read_checkpoint(path)
    if into is None:
        store = ParamStore()
        for name, arr in values.items():
            store.add(name, arr)
        return store
    into.set_values(values)
    return into
