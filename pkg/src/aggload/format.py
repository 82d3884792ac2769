"""Parse, validate, and write the safetensors on-disk format.

Wire layout: bytes 0..8 hold a little-endian u64 header length N, bytes
8..8+N are a UTF-8 JSON layout document, and everything after is the body
holding raw little-endian tensor payloads at the offsets the layout declares.
Parsing is pure and the resulting header objects are immutable, so they are
safe to share across worker threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import (
    HeaderTooLarge,
    LengthMismatch,
    MalformedJson,
    NegativeShape,
    OffsetOutOfBounds,
    OverlappingTensors,
    SizeMismatch,
    TruncatedHeader,
    UnknownDType,
)

__all__ = [
    "DType",
    "TensorMetadata",
    "FileHeader",
    "DEFAULT_HEADER_CAP",
    "parse_header",
    "read_header",
    "validate",
    "write_file",
]

# DoS guard for the 8-byte length prefix; configurable per call.
DEFAULT_HEADER_CAP = 100 * 1024 * 1024

_METADATA_KEY = "__metadata__"


class DType(Enum):
    """Element type tags, spelled exactly as the format spells them."""

    BOOL = "BOOL"
    U8 = "U8"
    I8 = "I8"
    I16 = "I16"
    U16 = "U16"
    I32 = "I32"
    U32 = "U32"
    I64 = "I64"
    U64 = "U64"
    F16 = "F16"
    BF16 = "BF16"
    F32 = "F32"
    F64 = "F64"

    @property
    def size_bytes(self) -> int:
        return _DTYPE_SIZES[self]

    @property
    def alignment(self) -> int:
        # Element-access alignment equals the element size; the format
        # itself imposes no wider requirement.
        return _DTYPE_SIZES[self]

    @classmethod
    def from_tag(cls, tag: str) -> "DType":
        try:
            return cls(tag)
        except ValueError:
            raise UnknownDType(f"unknown dtype tag {tag!r}") from None


_DTYPE_SIZES = {
    DType.BOOL: 1,
    DType.U8: 1,
    DType.I8: 1,
    DType.I16: 2,
    DType.U16: 2,
    DType.I32: 4,
    DType.U32: 4,
    DType.I64: 8,
    DType.U64: 8,
    DType.F16: 2,
    DType.BF16: 2,
    DType.F32: 4,
    DType.F64: 8,
}


def _numel(shape: Sequence[int]) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


@dataclass(frozen=True)
class TensorMetadata:
    """One tensor's dtype, shape, and byte range within the file body."""

    name: str
    dtype: DType
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def nbytes(self) -> int:
        return _numel(self.shape) * self.dtype.size_bytes

    @property
    def begin(self) -> int:
        return self.data_offsets[0]

    @property
    def end(self) -> int:
        return self.data_offsets[1]


@dataclass(frozen=True)
class FileHeader:
    """Parsed header: tensor layout plus the optional free-form metadata map."""

    header_len: int
    tensors: dict[str, TensorMetadata]
    metadata: dict[str, str] | None = None
    file_size: int | None = field(default=None, compare=False)

    @property
    def body_offset(self) -> int:
        return 8 + self.header_len


def parse_header(prefix_bytes: bytes, header_cap: int = DEFAULT_HEADER_CAP) -> FileHeader:
    """Parse a header from the leading bytes of a safetensors file.

    ``prefix_bytes`` must contain the full 8-byte length prefix and the JSON
    document it declares. Raises TruncatedHeader, HeaderTooLarge,
    MalformedJson, UnknownDType, or NegativeShape.
    """
    if len(prefix_bytes) < 8:
        raise TruncatedHeader(
            f"need at least 8 bytes for the length prefix, got {len(prefix_bytes)}"
        )
    (header_len,) = struct.unpack_from("<Q", prefix_bytes, 0)
    if header_len > header_cap:
        raise HeaderTooLarge(f"declared header length {header_len} exceeds cap {header_cap}")
    if len(prefix_bytes) < 8 + header_len:
        raise TruncatedHeader(
            f"declared header length {header_len} but only "
            f"{len(prefix_bytes) - 8} bytes follow the prefix"
        )
    doc = bytes(prefix_bytes[8 : 8 + header_len])
    return _parse_layout(doc, header_len)


def read_header(path: str | Path, header_cap: int = DEFAULT_HEADER_CAP) -> FileHeader:
    """Read and parse just the header region of a file on disk.

    The returned header carries ``file_size`` so callers can validate and
    plan transfers without re-stating the file.
    """
    path = Path(path)
    file_size = path.stat().st_size
    with open(path, "rb") as f:
        prefix = f.read(8)
        if len(prefix) < 8:
            raise TruncatedHeader(f"{path}: file shorter than the 8-byte length prefix")
        (header_len,) = struct.unpack("<Q", prefix)
        if header_len > header_cap:
            raise HeaderTooLarge(
                f"{path}: declared header length {header_len} exceeds cap {header_cap}"
            )
        doc = f.read(header_len)
    if len(doc) < header_len:
        raise TruncatedHeader(
            f"{path}: declared header length {header_len} but file holds {len(doc)}"
        )
    header = _parse_layout(doc, header_len)
    return FileHeader(header.header_len, header.tensors, header.metadata, file_size=file_size)


def _reject_duplicate_keys(pairs: list[tuple[str, object]]) -> dict:
    out: dict = {}
    for key, value in pairs:
        if key in out:
            raise MalformedJson(f"duplicate key {key!r} in layout JSON")
        out[key] = value
    return out


def _parse_layout(doc: bytes, header_len: int) -> FileHeader:
    try:
        layout = json.loads(doc.decode("utf-8"), object_pairs_hook=_reject_duplicate_keys)
    except MalformedJson:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedJson(f"header JSON does not parse: {e}") from None
    if not isinstance(layout, dict):
        raise MalformedJson(f"layout must be a JSON object, got {type(layout).__name__}")

    metadata: dict[str, str] | None = None
    tensors: dict[str, TensorMetadata] = {}
    for name, entry in layout.items():
        if name == _METADATA_KEY:
            if not isinstance(entry, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in entry.items()
            ):
                raise MalformedJson("__metadata__ must map strings to strings")
            metadata = dict(entry)
            continue
        tensors[name] = _parse_tensor_entry(name, entry)
    return FileHeader(header_len=header_len, tensors=tensors, metadata=metadata)


def _parse_tensor_entry(name: str, entry: object) -> TensorMetadata:
    if not isinstance(entry, dict):
        raise MalformedJson(f"tensor {name!r}: layout entry must be an object")
    missing = {"dtype", "shape", "data_offsets"} - entry.keys()
    if missing:
        raise MalformedJson(f"tensor {name!r}: missing fields {sorted(missing)}")

    tag = entry["dtype"]
    if not isinstance(tag, str):
        raise MalformedJson(f"tensor {name!r}: dtype must be a string")
    dtype = DType.from_tag(tag)

    shape = entry["shape"]
    if not isinstance(shape, list) or not all(
        isinstance(d, int) and not isinstance(d, bool) for d in shape
    ):
        raise MalformedJson(f"tensor {name!r}: shape must be a list of integers")
    if any(d < 0 for d in shape):
        raise NegativeShape(f"tensor {name!r}: shape {shape} has a negative dimension")

    offsets = entry["data_offsets"]
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
        or any(o < 0 for o in offsets)
    ):
        raise MalformedJson(
            f"tensor {name!r}: data_offsets must be two non-negative integers"
        )
    return TensorMetadata(
        name=name, dtype=dtype, shape=tuple(shape), data_offsets=(offsets[0], offsets[1])
    )


def validate(header: FileHeader, file_size: int) -> None:
    """Check every tensor range against the body of a ``file_size``-byte file.

    Gaps between ranges are accepted (third-party writers may pad); overlap,
    ranges past the body end, and shape/range size disagreements are not.
    """
    body_len = file_size - header.body_offset
    if body_len < 0:
        raise OffsetOutOfBounds(
            f"header ends at {header.body_offset} but file is {file_size} bytes"
        )
    occupied: list[tuple[int, int, str]] = []
    for meta in header.tensors.values():
        begin, end = meta.data_offsets
        if end < begin:
            raise OffsetOutOfBounds(f"tensor {meta.name!r}: begin {begin} > end {end}")
        if end > body_len:
            raise OffsetOutOfBounds(
                f"tensor {meta.name!r}: range [{begin}, {end}) exceeds body length {body_len}"
            )
        if end - begin != meta.nbytes:
            raise SizeMismatch(
                f"tensor {meta.name!r}: range holds {end - begin} bytes but "
                f"shape {list(meta.shape)} x {meta.dtype.value} needs {meta.nbytes}"
            )
        if begin != end:
            occupied.append((begin, end, meta.name))
    occupied.sort()
    for (b1, e1, n1), (b2, e2, n2) in zip(occupied, occupied[1:]):
        if b2 < e1:
            raise OverlappingTensors(
                f"tensors {n1!r} [{b1}, {e1}) and {n2!r} [{b2}, {e2}) overlap"
            )


def write_file(
    tensors: Mapping[str, tuple[DType | str, Iterable[int], bytes]],
    metadata: Mapping[str, str] | None = None,
    pad_header_to: int | None = None,
) -> bytes:
    """Serialize tensors into a safetensors byte string (fixture generator).

    Tensors are packed contiguously in mapping order with data_offsets
    assigned cumulatively from 0, so output is deterministic.
    ``pad_header_to`` pads the JSON document with trailing spaces to exactly
    that length, which is how fixtures reproduce files whose body starts at
    an arbitrary (possibly odd) offset.
    """
    layout: dict[str, object] = {}
    if metadata is not None:
        layout[_METADATA_KEY] = dict(metadata)
    body = bytearray()
    cursor = 0
    for name, (dtype, shape, raw) in tensors.items():
        if isinstance(dtype, str):
            dtype = DType.from_tag(dtype)
        shape = tuple(shape)
        expect = _numel(shape) * dtype.size_bytes
        if len(raw) != expect:
            raise LengthMismatch(
                f"tensor {name!r}: got {len(raw)} raw bytes, shape "
                f"{list(shape)} x {dtype.value} needs {expect}"
            )
        layout[name] = {
            "dtype": dtype.value,
            "shape": list(shape),
            "data_offsets": [cursor, cursor + expect],
        }
        body += raw
        cursor += expect

    doc = json.dumps(layout, separators=(",", ":")).encode("utf-8")
    if pad_header_to is not None:
        if pad_header_to < len(doc):
            raise ValueError(
                f"pad_header_to={pad_header_to} is smaller than the layout JSON ({len(doc)} bytes)"
            )
        doc += b" " * (pad_header_to - len(doc))
    return struct.pack("<Q", len(doc)) + doc + bytes(body)
