"""Naive per-tensor reference loader.

This is both the correctness oracle for the aggregated pipeline and the
deliberately slow baseline for benchmarks: it seeks to each tensor's range,
reads it into fresh host memory, instantiates a host array, and (for the
baseline) copies that into a separate device-style allocation, one tensor
at a time. It shares nothing with the transfer/device/collective path.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .format import TensorMetadata, read_header, validate

__all__ = [
    "load_tensor_bytes",
    "load_shard_bytes",
    "load_all",
    "naive_sequential_load",
]

# Same-width unsigned views keep slicing bit-exact for every dtype,
# including BOOL and BF16 which have no native numpy equivalent.
_UINT_OF_SIZE = {1: np.uint8, 2: np.uint16, 4: np.uint32, 8: np.uint64}


def _read_range(f, body_offset: int, meta: TensorMetadata) -> bytes:
    f.seek(body_offset + meta.begin)
    raw = f.read(meta.nbytes)
    if len(raw) != meta.nbytes:
        raise EOFError(f"tensor {meta.name!r}: short read ({len(raw)} of {meta.nbytes})")
    return raw


def load_tensor_bytes(path: str | Path, key: str) -> tuple[TensorMetadata, bytes]:
    header = read_header(path)
    meta = header.tensors[key]
    with open(path, "rb") as f:
        return meta, _read_range(f, header.body_offset, meta)


def _shard_ranges(extent: int, world_size: int) -> list[tuple[int, int]]:
    base, extra = divmod(extent, world_size)
    out = []
    lo = 0
    for r in range(world_size):
        hi = lo + base + (1 if r < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


def load_shard_bytes(
    path: str | Path, key: str, dim: int, world_size: int, rank: int
) -> tuple[tuple[int, ...], bytes]:
    """Read one tensor and slice out rank's part along dim, host-side."""
    meta, raw = load_tensor_bytes(path, key)
    shape = meta.shape
    lo, hi = _shard_ranges(shape[dim], world_size)[rank]
    arr = np.frombuffer(raw, dtype=_UINT_OF_SIZE[meta.dtype.size_bytes]).reshape(shape)
    index = (slice(None),) * dim + (slice(lo, hi),)
    part = np.ascontiguousarray(arr[index])
    return part.shape, part.tobytes()


def load_all(paths: list[str | Path]) -> dict[str, tuple[TensorMetadata, bytes]]:
    out: dict[str, tuple[TensorMetadata, bytes]] = {}
    for path in paths:
        header = read_header(path)
        validate(header, header.file_size)
        with open(path, "rb") as f:
            for key, meta in header.tensors.items():
                out[key] = (meta, _read_range(f, header.body_offset, meta))
    return out


def naive_sequential_load(paths: list[str | Path]) -> dict[str, np.ndarray]:
    """Benchmark baseline: per-tensor read -> host array -> device-style copy."""
    out: dict[str, np.ndarray] = {}
    for path in paths:
        header = read_header(path)
        with open(path, "rb") as f:
            for key, meta in header.tensors.items():
                raw = _read_range(f, header.body_offset, meta)
                host = np.frombuffer(raw, dtype=np.uint8).copy()  # host tensor object
                device = np.empty(meta.nbytes, dtype=np.uint8)
                device[:] = host  # the per-tensor host->device hop
                out[key] = device
    return out
