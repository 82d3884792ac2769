"""Zero-copy tensor handles over device buffers.

A view is dtype + shape + row-major byte strides + a base offset into a
DeviceBuffer; creating one copies nothing. Views are immutable and safe to
share across threads, and they keep their hosting buffer alive: a buffer
with live views can only be reclaimed through the forced close path.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .device import DeviceBuffer
from .errors import IndexOutOfRange, MisalignedView, OutOfBoundsView, UseAfterClose
from .format import DType, TensorMetadata

__all__ = ["TensorView", "Element", "compute_strides", "make_view", "read_element"]


def compute_strides(shape: Sequence[int], dtype: DType) -> tuple[int, ...]:
    """Row-major byte strides: last dim strides one element, each prior dim
    strides the full extent of everything after it."""
    if any(d < 0 for d in shape):
        raise ValueError(f"negative dimension in shape {list(shape)}")
    strides = [0] * len(shape)
    acc = dtype.size_bytes
    for i in range(len(shape) - 1, -1, -1):
        strides[i] = acc
        acc *= shape[i]
    return tuple(strides)


# numpy equivalents for raw access; BOOL and BF16 are surfaced as raw bits.
_NP_DTYPES = {
    DType.BOOL: np.uint8,
    DType.U8: np.uint8,
    DType.I8: np.int8,
    DType.I16: np.int16,
    DType.U16: np.uint16,
    DType.I32: np.int32,
    DType.U32: np.uint32,
    DType.I64: np.int64,
    DType.U64: np.uint64,
    DType.F16: np.float16,
    DType.BF16: np.uint16,
    DType.F32: np.float32,
    DType.F64: np.float64,
}

_STRUCT_CODES = {
    DType.I8: "b",
    DType.I16: "h",
    DType.I32: "i",
    DType.I64: "q",
    DType.U8: "B",
    DType.U16: "H",
    DType.U32: "I",
    DType.U64: "Q",
    DType.F16: "e",
    DType.F32: "f",
    DType.F64: "d",
}


@dataclass(frozen=True)
class Element:
    """A decoded scalar: numeric value as a 64-bit float plus the raw bits."""

    value: float
    bits: int


# eq=False: views compare (and weak-register) by identity, so the hosting
# buffer's live-view tracking counts every distinct handle.
@dataclass(frozen=True, eq=False)
class TensorView:
    buffer: DeviceBuffer
    base_offset: int
    dtype: DType
    shape: tuple[int, ...]
    strides: tuple[int, ...] = field(default=())

    @property
    def numel(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    @property
    def nbytes(self) -> int:
        return self.numel * self.dtype.size_bytes

    def tobytes(self) -> bytes:
        """Raw little-endian bytes of the (contiguous) viewed region."""
        self._check_open()
        return self.buffer.read_bytes(self.base_offset, self.nbytes)

    def as_numpy(self) -> np.ndarray:
        """Zero-copy numpy array over the region (BOOL/BF16 come back as raw
        uint bits; see _NP_DTYPES)."""
        self._check_open()
        raw = self.buffer.array[self.base_offset : self.base_offset + self.nbytes]
        return raw.view(_NP_DTYPES[self.dtype]).reshape(self.shape)

    def descriptor(self) -> dict:
        """JSON-ready view descriptor for inspect-style output."""
        return {
            "device_id": self.buffer.device_id,
            "offset": self.base_offset,
            "dtype": self.dtype.value,
            "shape": list(self.shape),
            "strides": list(self.strides),
        }

    def _check_open(self) -> None:
        if self.buffer.released:
            raise UseAfterClose("the buffer backing this view was released")

    def __repr__(self) -> str:
        return (
            f"TensorView(dtype={self.dtype.value}, shape={list(self.shape)}, "
            f"offset={self.base_offset}, device={self.buffer.device_id})"
        )


def make_view(buf: DeviceBuffer, base_offset: int, meta: TensorMetadata) -> TensorView:
    """Wrap a buffer region as a tensor; aliases the buffer, copies nothing."""
    if base_offset % meta.dtype.alignment:
        raise MisalignedView(
            f"offset {base_offset} is not a multiple of {meta.dtype.alignment} "
            f"({meta.dtype.value})"
        )
    strides = compute_strides(meta.shape, meta.dtype)
    extent = meta.nbytes
    if base_offset < 0 or base_offset + extent > buf.capacity:
        raise OutOfBoundsView(
            f"view [{base_offset}, {base_offset + extent}) exceeds capacity {buf.capacity}"
        )
    if buf.released:
        raise UseAfterClose("cannot view a released buffer")
    view = TensorView(buf, base_offset, meta.dtype, tuple(meta.shape), strides)
    buf._live_views.add(view)
    return view


def read_element(view: TensorView, index: Sequence[int]) -> Element:
    """Decode one element (little-endian) at a multi-dimensional index."""
    view._check_open()
    if len(index) != len(view.shape):
        raise IndexOutOfRange(
            f"index {list(index)} has rank {len(index)}, view has rank {len(view.shape)}"
        )
    for i, (idx, dim) in enumerate(zip(index, view.shape)):
        if not 0 <= idx < dim:
            raise IndexOutOfRange(f"index {list(index)} out of range at dim {i} (size {dim})")
    off = view.base_offset + sum(i * s for i, s in zip(index, view.strides))
    raw = view.buffer.read_bytes(off, view.dtype.size_bytes)
    bits = int.from_bytes(raw, "little")
    if view.dtype is DType.BOOL:
        return Element(value=1.0 if bits else 0.0, bits=bits)
    if view.dtype is DType.BF16:
        (f32,) = struct.unpack("<f", struct.pack("<I", bits << 16))
        return Element(value=float(f32), bits=bits)
    (val,) = struct.unpack("<" + _STRUCT_CODES[view.dtype], raw)
    return Element(value=float(val), bits=bits)
