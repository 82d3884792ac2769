"""Device-memory abstraction with host and simulated direct-transfer backends.

The Host backend stages file bytes through a bounce buffer (the pread +
small-DMA-staging fallback path). The SimDirect backend models direct
storage-to-device DMA: transfers must start at 512-byte-aligned file and
device offsets, which is what forces the post-transfer alignment fix when a
file's body starts at an odd offset.

Buffers are backed by numpy byte arrays. Released capacity goes to a
per-device pool whose byte counts are observable, emulating a caching
device allocator.
"""

from __future__ import annotations

import math
import os
import threading
import weakref
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BounceTooSmall,
    DoubleRelease,
    IoError,
    MisalignedDirectTransfer,
    OutOfBoundsView,
    OutOfMemory,
    UnsupportedConversion,
)
from .format import DType, TensorMetadata

__all__ = [
    "BackendKind",
    "DeviceBackend",
    "DeviceBuffer",
    "DevicePool",
    "DEFAULT_ALIGN_BOUNCE",
    "DEFAULT_HOST_BOUNCE",
    "DIRECT_ALIGNMENT",
    "transfer_from_file",
    "align_fix",
    "align_and_convert",
    "convert_dtype",
]

DIRECT_ALIGNMENT = 512
DEFAULT_HOST_BOUNCE = 160 * 1024 * 1024  # per-worker host staging
DEFAULT_ALIGN_BOUNCE = 16 * 1024 * 1024  # on-device staging for the alignment fix


class BackendKind(Enum):
    HOST = "host"
    SIM_DIRECT = "simdirect"


@dataclass(frozen=True)
class DeviceBackend:
    kind: BackendKind
    transfer_alignment: int
    bounce_buffer_bytes: int

    @classmethod
    def host(cls, bounce_buffer_bytes: int = DEFAULT_HOST_BOUNCE) -> "DeviceBackend":
        return cls(BackendKind.HOST, 1, bounce_buffer_bytes)

    @classmethod
    def sim_direct(cls, bounce_buffer_bytes: int = DEFAULT_ALIGN_BOUNCE) -> "DeviceBackend":
        return cls(BackendKind.SIM_DIRECT, DIRECT_ALIGNMENT, bounce_buffer_bytes)

    @classmethod
    def of(cls, kind: "str | BackendKind | DeviceBackend") -> "DeviceBackend":
        if isinstance(kind, DeviceBackend):
            return kind
        if isinstance(kind, str):
            kind = BackendKind(kind.lower())
        return cls.host() if kind is BackendKind.HOST else cls.sim_direct()


class DeviceBuffer:
    """A contiguous allocation on one device; unit of bulk transfer and release.

    Writers during transfer execution touch disjoint ranges only (the planner
    guarantees it); afterwards the buffer is read-only and freely shareable.
    """

    def __init__(self, pool: "DevicePool", array: np.ndarray):
        self.pool = pool
        self._array = array
        self.capacity = int(array.nbytes)
        self.device_id = pool.device_id
        self.backend = pool.backend
        self.refcount = 0  # unconsumed tensor keys hosted; maintained by the loader
        self.released = False
        self._live_views: weakref.WeakSet = weakref.WeakSet()

    @property
    def array(self) -> np.ndarray:
        if self.released:
            raise DoubleRelease(f"buffer on device {self.device_id} was already released")
        return self._array

    def _check_range(self, off: int, length: int) -> None:
        if off < 0 or length < 0 or off + length > self.capacity:
            raise OutOfBoundsView(
                f"range [{off}, {off + length}) outside buffer capacity {self.capacity}"
            )

    def write_bytes(self, off: int, data: bytes | np.ndarray) -> None:
        data = np.frombuffer(data, dtype=np.uint8) if isinstance(data, (bytes, bytearray)) else data
        self._check_range(off, data.nbytes)
        self.array[off : off + data.nbytes] = data.view(np.uint8).reshape(-1)

    def read_bytes(self, off: int, length: int) -> bytes:
        self._check_range(off, length)
        return self.array[off : off + length].tobytes()

    def live_view_count(self) -> int:
        return len(self._live_views)

    def release(self, *, force: bool = False, to_pool: bool = True) -> None:
        self.pool.release(self, force=force, to_pool=to_pool)

    def __repr__(self) -> str:
        state = "released" if self.released else f"refcount={self.refcount}"
        return f"DeviceBuffer(device={self.device_id}, capacity={self.capacity}, {state})"


class DevicePool:
    """Per-device allocator with an observable free pool.

    Released buffers park their capacity here for exact-size reuse, the way a
    caching device allocator would. ``capacity_cap`` bounds live + pooled
    bytes so out-of-memory paths are testable.
    """

    def __init__(
        self,
        backend: DeviceBackend | str = "host",
        device_id: int = 0,
        capacity_cap: int | None = None,
    ):
        self.backend = DeviceBackend.of(backend)
        self.device_id = device_id
        self.capacity_cap = capacity_cap
        self._lock = threading.Lock()
        self._free: dict[int, list[np.ndarray]] = {}
        self.allocated_bytes = 0
        self.pooled_bytes = 0
        self.cumulative_pooled_bytes = 0  # total ever returned to the pool

    def allocate(self, size: int) -> DeviceBuffer:
        if size < 0:
            raise ValueError(f"allocation size must be non-negative, got {size}")
        with self._lock:
            blocks = self._free.get(size)
            if blocks:
                array = blocks.pop()
                array.fill(0)
                self.pooled_bytes -= size
            else:
                if self.capacity_cap is not None:
                    # Evict cached blocks before declaring the device full.
                    while (
                        self.allocated_bytes + self.pooled_bytes + size > self.capacity_cap
                        and self.pooled_bytes > 0
                    ):
                        self._evict_one()
                    if self.allocated_bytes + size > self.capacity_cap:
                        raise OutOfMemory(
                            f"device {self.device_id}: {size} bytes requested, "
                            f"{self.allocated_bytes} live of {self.capacity_cap} cap"
                        )
                array = np.zeros(size, dtype=np.uint8)
            self.allocated_bytes += size
            return DeviceBuffer(self, array)

    def _evict_one(self) -> None:
        for cap, blocks in sorted(self._free.items()):
            if blocks:
                blocks.pop()
                self.pooled_bytes -= cap
                if not blocks:
                    del self._free[cap]
                return

    def release(self, buf: DeviceBuffer, *, force: bool = False, to_pool: bool = True) -> None:
        with self._lock:
            if buf.released:
                raise DoubleRelease(
                    f"buffer on device {self.device_id} released twice"
                )
            if not force:
                if buf.refcount != 0:
                    raise ValueError(
                        f"buffer still hosts {buf.refcount} unconsumed keys; "
                        "only the close path may force-release it"
                    )
                if buf.live_view_count() > 0:
                    raise ValueError(
                        f"buffer has {buf.live_view_count()} live views; "
                        "only the close path may force-release it"
                    )
            buf.released = True
            self.allocated_bytes -= buf.capacity
            if to_pool:
                self._free.setdefault(buf.capacity, []).append(buf._array)
                self.pooled_bytes += buf.capacity
                self.cumulative_pooled_bytes += buf.capacity
            buf._array = np.empty(0, dtype=np.uint8)


# --- file -> device transfer -----------------------------------------------


def _fd_of(file) -> int:
    if isinstance(file, int):
        return file
    return file.fileno()


def _preadv_into(fd: int, view: memoryview, file_off: int) -> None:
    done = 0
    total = len(view)
    while done < total:
        n = os.preadv(fd, [view[done:]], file_off + done)
        if n <= 0:
            raise IoError(
                f"unexpected EOF at file offset {file_off + done} ({total - done} bytes short)"
            )
        done += n


def transfer_from_file(
    buf: DeviceBuffer,
    dev_off: int,
    file,
    file_off: int,
    length: int,
    staging: np.ndarray | None = None,
) -> None:
    """Copy ``length`` file bytes at ``file_off`` into ``buf`` at ``dev_off``.

    Host backend: staged through a bounce buffer of the backend's configured
    size, so the whole range is never resident in host staging at once.
    SimDirect backend: offsets must be 512-byte multiples and the length a
    512 multiple unless the range ends exactly at end-of-file; bytes then
    move directly into device memory.
    """
    buf._check_range(dev_off, length)
    fd = _fd_of(file)
    if length == 0:
        return
    try:
        if buf.backend.kind is BackendKind.SIM_DIRECT:
            align = buf.backend.transfer_alignment
            if file_off % align or dev_off % align:
                raise MisalignedDirectTransfer(
                    f"direct transfer needs {align}-byte aligned offsets, "
                    f"got file_off={file_off} dev_off={dev_off}"
                )
            if length % align:
                file_size = os.fstat(fd).st_size
                if file_off + length != file_size:
                    raise MisalignedDirectTransfer(
                        f"direct transfer length {length} is not a {align} multiple "
                        "and does not end at end-of-file"
                    )
            _preadv_into(fd, buf.array[dev_off : dev_off + length].data, file_off)
            return

        bounce = buf.backend.bounce_buffer_bytes
        if staging is None:
            staging = np.empty(min(bounce, length), dtype=np.uint8)
        step = min(bounce, staging.nbytes)
        if step <= 0:
            raise BounceTooSmall("host staging buffer has zero capacity")
        array = buf.array
        for start in range(0, length, step):
            n = min(step, length - start)
            _preadv_into(fd, staging[:n].data, file_off + start)
            array[dev_off + start : dev_off + start + n] = staging[:n]
    except OSError as e:
        raise IoError(f"read failed at offset {file_off}: {e}") from e


# --- alignment fix and dtype conversion ------------------------------------

_CONVERSIONS = {
    (DType.BF16, DType.F16),
    (DType.F32, DType.F16),
    (DType.F16, DType.F32),
    (DType.BF16, DType.F32),
}

_NP_FLOATS = {DType.F16: np.float16, DType.F32: np.float32}


def _as_f32(raw: np.ndarray, src: DType) -> np.ndarray:
    if src is DType.BF16:
        # BF16 is the top half of an F32; widen exactly by bit placement.
        return (raw.view(np.uint16).astype(np.uint32) << 16).view(np.float32)
    return raw.view(_NP_FLOATS[src]).astype(np.float32)


def _convert_elements(raw: np.ndarray, src: DType, dst: DType) -> np.ndarray:
    """Convert a contiguous byte chunk of src elements to dst element bytes.

    Narrowing goes through 32-bit floats with IEEE round-to-nearest-even;
    out-of-range values become the target infinity.
    """
    as32 = _as_f32(raw, src)
    if dst is DType.F32:
        return as32.view(np.uint8)
    with np.errstate(over="ignore"):  # out-of-range narrows to infinity by design
        return as32.astype(np.float16).view(np.uint8)


@dataclass
class _Move:
    name: str
    src_off: int
    dst_off: int
    numel: int
    src_dtype: DType
    dst_dtype: DType
    meta: TensorMetadata

    @property
    def src_bytes(self) -> int:
        return self.numel * self.src_dtype.size_bytes

    @property
    def dst_bytes(self) -> int:
        return self.numel * self.dst_dtype.size_bytes


def _round_up(x: int, align: int) -> int:
    return -(-x // align) * align


def _numel(shape: Sequence[int]) -> int:
    return int(math.prod(shape))


def _chunk_direction(mv: _Move, elems_per_chunk: int) -> str:
    """Pick a memmove-safe chunk order for one tensor's relocation.

    Writing chunk j must never touch source bytes of a chunk not yet read.
    Both constraints are linear in j, so the chunk-boundary endpoints decide.
    """
    s, t, n = mv.src_off, mv.dst_off, mv.numel
    ssz, dsz = mv.src_dtype.size_bytes, mv.dst_dtype.size_bytes
    if t + n * dsz <= s or t >= s + n * ssz:
        return "ascending"  # disjoint regions
    chunks = -(-n // elems_per_chunk)
    if chunks <= 1:
        return "ascending"

    def ok(j: int, sign: int) -> bool:
        gap = (t - s) + j * elems_per_chunk * (dsz - ssz)
        return gap <= 0 if sign < 0 else gap >= 0

    if all(ok(j, -1) for j in (1, chunks - 1)):
        return "ascending"
    if all(ok(j, +1) for j in (1, chunks - 1)):
        return "descending"
    return "staged"


def _copy_one(
    array: np.ndarray,
    mv: _Move,
    bounce: np.ndarray,
    src: tuple[np.ndarray, int] | None = None,
) -> None:
    """Relocate (and optionally convert) one tensor through the bounce buffer.

    ``src`` overrides the source storage when the bytes were parked in a
    scratch copy; otherwise the tensor is moved within ``array`` itself with
    a memmove-safe chunk direction.
    """
    if mv.numel == 0:
        return
    per_elem = max(mv.src_dtype.size_bytes, mv.dst_dtype.size_bytes)
    k = bounce.nbytes // per_elem
    if src is not None:
        src_arr, src_base = src
        direction = "ascending"
    else:
        direction = _chunk_direction(mv, k)
        if direction == "staged":
            # Source and target interleave in both directions (reachable only
            # when mixed-size conversions repack tightly); park the source.
            hold = array[mv.src_off : mv.src_off + mv.src_bytes].copy()
            src_arr, src_base = hold, 0
            direction = "ascending"
        else:
            src_arr, src_base = array, mv.src_off

    starts: Iterable[int] = range(0, mv.numel, k)
    if direction == "descending":
        starts = reversed(list(starts))
    ssz, dsz = mv.src_dtype.size_bytes, mv.dst_dtype.size_bytes
    for e0 in starts:
        e1 = min(e0 + k, mv.numel)
        chunk = src_arr[src_base + e0 * ssz : src_base + e1 * ssz]
        if mv.src_dtype is mv.dst_dtype:
            out = bounce[: chunk.nbytes]
            out[:] = chunk
        else:
            converted = _convert_elements(chunk, mv.src_dtype, mv.dst_dtype)
            out = bounce[: converted.nbytes]
            out[:] = converted
        array[mv.dst_off + e0 * dsz : mv.dst_off + e1 * dsz] = out


def _execute_moves(array: np.ndarray, moves: list[_Move], bounce: np.ndarray) -> None:
    """Run tensor relocations in an order where no write clobbers an unread source."""
    if all(mv.src_bytes == mv.dst_bytes for mv in moves):
        # Pure repack: left-movers ascending, then right-movers descending. A
        # left-mover's target ends before every later source starts, and a
        # right-mover's target sits past every earlier source, so this order
        # never touches unread bytes.
        left = [mv for mv in moves if mv.dst_off <= mv.src_off]
        right = [mv for mv in moves if mv.dst_off > mv.src_off]
        for mv in sorted(left, key=lambda m: m.dst_off) + sorted(
            right, key=lambda m: m.dst_off, reverse=True
        ):
            _copy_one(array, mv, bounce)
        return

    # Size-changing conversions can move tensors in conflicting directions.
    # Greedily run moves whose target hits no pending source; park a source
    # in scratch to break the occasional cycle and write it out at the end
    # (targets are pairwise disjoint, so deferred writes cannot conflict).
    pending = sorted(moves, key=lambda m: m.dst_off)
    deferred: list[tuple[_Move, np.ndarray]] = []
    while pending:
        pick = None
        for mv in pending:
            lo, hi = mv.dst_off, mv.dst_off + mv.dst_bytes
            if all(
                other is mv
                or hi <= other.src_off
                or other.src_off + other.src_bytes <= lo
                for other in pending
            ):
                pick = mv
                break
        if pick is not None:
            pending.remove(pick)
            _copy_one(array, pick, bounce)
        else:
            mv = min(pending, key=lambda m: m.src_bytes)
            pending.remove(mv)
            deferred.append((mv, array[mv.src_off : mv.src_off + mv.src_bytes].copy()))
    for mv, hold in deferred:
        _copy_one(array, mv, bounce, src=(hold, 0))


def align_and_convert(
    buf: DeviceBuffer,
    landing: Iterable[tuple[str, int, TensorMetadata]],
    bounce: int,
    conversions: dict[str, DType] | None = None,
) -> list[tuple[str, int, TensorMetadata]]:
    """Repack tensors to dtype-aligned offsets, converting dtypes in the same pass.

    ``landing`` gives where the transfer left each tensor. Tensors are
    repacked in ascending landing order with each start rounded up to the
    (target) dtype's alignment; the per-tensor copy goes chunk by chunk
    through an on-device bounce of ``bounce`` bytes, ascending when the
    tensor's net shift is <= 0 and descending otherwise. Returns
    (name, new offset, updated metadata) per tensor.
    """
    conversions = conversions or {}
    entries = sorted(landing, key=lambda e: e[1])
    for name, _, meta in entries:
        target = conversions.get(name, meta.dtype)
        if (meta.dtype, target) not in _CONVERSIONS and target is not meta.dtype:
            raise UnsupportedConversion(
                f"tensor {name!r}: {meta.dtype.value} -> {target.value} is not supported"
            )

    if not conversions and all(
        off % meta.dtype.alignment == 0 for _, off, meta in entries
    ):
        return [
            (
                name,
                off,
                TensorMetadata(meta.name, meta.dtype, meta.shape, (off, off + meta.nbytes)),
            )
            for name, off, meta in entries
        ]

    moves: list[_Move] = []
    cursor = 0
    for name, off, meta in entries:
        dst_dtype = conversions.get(name, meta.dtype)
        numel = _numel(meta.shape)
        dst_off = _round_up(cursor, dst_dtype.alignment)
        moves.append(_Move(name, off, dst_off, numel, meta.dtype, dst_dtype, meta))
        cursor = dst_off + numel * dst_dtype.size_bytes

    if cursor > buf.capacity:
        raise OutOfBoundsView(
            f"repacked layout needs {cursor} bytes but buffer capacity is {buf.capacity}"
        )
    max_elem = max((max(m.src_dtype.size_bytes, m.dst_dtype.size_bytes) for m in moves), default=1)
    if bounce < max_elem:
        raise BounceTooSmall(
            f"bounce of {bounce} bytes cannot hold a {max_elem}-byte element"
        )

    _execute_moves(buf.array, moves, np.empty(bounce, dtype=np.uint8))

    by_name = {mv.name: mv for mv in moves}
    out = []
    for name, _, meta in entries:
        mv = by_name[name]
        new_meta = TensorMetadata(
            name=meta.name,
            dtype=mv.dst_dtype,
            shape=meta.shape,
            data_offsets=(mv.dst_off, mv.dst_off + mv.dst_bytes),
        )
        out.append((name, mv.dst_off, new_meta))
    return out


def align_fix(
    buf: DeviceBuffer,
    landing: Iterable[tuple[str, int, TensorMetadata]],
    bounce: int = DEFAULT_ALIGN_BOUNCE,
) -> list[tuple[str, int]]:
    """Repack transferred tensors so every offset is dtype-aligned.

    A no-op (returning the input offsets) when everything is already
    aligned, which also makes the fix idempotent.
    """
    table = align_and_convert(buf, landing, bounce)
    return [(name, off) for name, off, _ in table]


def convert_dtype(
    buf: DeviceBuffer,
    view_meta: TensorMetadata,
    target: DType,
    bounce: int = DEFAULT_ALIGN_BOUNCE,
) -> TensorMetadata:
    """Convert one tensor region in place; data_offsets are device offsets.

    The converted tensor keeps its begin offset; the caller guarantees room
    for widening conversions.
    """
    if (view_meta.dtype, target) not in _CONVERSIONS:
        raise UnsupportedConversion(
            f"{view_meta.dtype.value} -> {target.value} is not supported"
        )
    numel = _numel(view_meta.shape)
    begin = view_meta.begin
    dst_bytes = numel * target.size_bytes
    if begin % target.alignment:
        raise OutOfBoundsView(
            f"offset {begin} is not aligned for {target.value}"
        )
    if begin + dst_bytes > buf.capacity:
        raise OutOfBoundsView(
            f"converted tensor needs [{begin}, {begin + dst_bytes}) but capacity is {buf.capacity}"
        )
    if bounce < max(view_meta.dtype.size_bytes, target.size_bytes):
        raise BounceTooSmall(f"bounce of {bounce} bytes cannot hold one element")
    mv = _Move(view_meta.name, begin, begin, numel, view_meta.dtype, target, view_meta)
    _copy_one(buf.array, mv, np.empty(bounce, dtype=np.uint8))
    return TensorMetadata(
        name=view_meta.name,
        dtype=target,
        shape=view_meta.shape,
        data_offsets=(begin, begin + dst_bytes),
    )
