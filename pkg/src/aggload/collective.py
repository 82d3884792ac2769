"""In-process multi-rank process group with rendezvous collectives.

Ranks are participant threads inside one process. Every collective is a
blocking rendezvous: all ranks must issue the same operations in the same
order, which is the standard contract for tensor-parallel inference code.
Ordering bugs surface as RendezvousTimeout (either a peer never arrives, or
the arriving descriptors disagree), never as silently wrong data.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np

from .device import DeviceBuffer, DevicePool
from .errors import BadDim, DimTooSmall, RendezvousTimeout, SpecMismatch
from .format import DType, TensorMetadata
from .tensorview import TensorView, make_view

__all__ = ["ProcessGroup", "SingleGroup", "ShardSpec", "partition"]

DEFAULT_TIMEOUT = 30.0


@dataclass(frozen=True)
class ShardSpec:
    """How one tensor splits across ranks along a single dimension."""

    key: str
    dim: int
    world_size: int
    full_shape: tuple[int, ...]
    part_shapes: tuple[tuple[int, ...], ...]

    def bounds(self, rank: int) -> tuple[int, int]:
        lo = sum(p[self.dim] for p in self.part_shapes[:rank])
        return lo, lo + self.part_shapes[rank][self.dim]

    def to_json(self) -> dict:
        return {
            "key": self.key,
            "dim": self.dim,
            "world_size": self.world_size,
            "full_shape": list(self.full_shape),
            "part_shapes": [list(p) for p in self.part_shapes],
        }


def partition(meta: TensorMetadata, dim: int, world_size: int) -> ShardSpec:
    """Split a shape along ``dim``: equal parts when divisible, otherwise the
    first ``shape[dim] % world_size`` ranks carry one extra element."""
    shape = meta.shape
    if dim < 0 or dim >= len(shape):
        raise BadDim(f"dim {dim} out of range for shape {list(shape)}")
    if shape[dim] < world_size:
        raise DimTooSmall(
            f"cannot split dim {dim} of size {shape[dim]} across {world_size} ranks"
        )
    base, extra = divmod(shape[dim], world_size)
    parts = []
    for r in range(world_size):
        part = list(shape)
        part[dim] = base + (1 if r < extra else 0)
        parts.append(tuple(part))
    return ShardSpec(
        key=meta.name,
        dim=dim,
        world_size=world_size,
        full_shape=tuple(shape),
        part_shapes=tuple(parts),
    )


class ProcessGroup:
    """A fixed set of in-process ranks sharing a rendezvous slot.

    Each rank is one thread of control; a rank must never issue two
    collectives concurrently. Once any rank times out or fails mid-
    collective the group is poisoned and every later call fails fast.
    """

    def __init__(self, world_size: int, timeout: float = DEFAULT_TIMEOUT):
        if world_size < 1:
            raise ValueError(f"world_size must be >= 1, got {world_size}")
        self.world_size = world_size
        self.timeout = timeout
        self._cv = threading.Condition()
        self._gen = 0
        self._slots: dict[int, object] = {}
        self._done: dict[int, list] = {}  # gen -> [snapshot, readers_left]
        self._poison: str | None = None

    def rank_ids(self) -> range:
        return range(self.world_size)

    # -- rendezvous core ---------------------------------------------------

    def _poison_now(self, reason: str) -> None:
        self._poison = reason
        self._cv.notify_all()

    def exchange(self, rank: int, payload: object) -> dict[int, object]:
        """Post a payload and block until every rank has posted one.

        Returns the same rank->payload snapshot on all ranks. This is the
        primitive under broadcast/scatter and is usable directly for small
        control messages (it never copies tensor data).
        """
        if not 0 <= rank < self.world_size:
            raise ValueError(f"rank {rank} not in group of {self.world_size}")
        if self.world_size == 1:
            return {0: payload}
        with self._cv:
            if self._poison:
                raise RendezvousTimeout(self._poison)
            if rank in self._slots:
                self._poison_now(f"rank {rank} issued a collective out of turn")
                raise RendezvousTimeout(self._poison)
            gen = self._gen
            self._slots[rank] = payload
            if len(self._slots) == self.world_size:
                self._done[gen] = [dict(self._slots), self.world_size]
                self._slots = {}
                self._gen += 1
                self._cv.notify_all()
            else:
                deadline = time.monotonic() + self.timeout
                while gen not in self._done and not self._poison:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        self._poison_now(
                            f"rank {rank} timed out after {self.timeout}s waiting for "
                            f"peers (collective #{gen}); a rank failed to arrive"
                        )
                        break
                    self._cv.wait(remaining)
                if gen not in self._done:
                    raise RendezvousTimeout(self._poison)
            snap, left = self._done[gen]
            if left == 1:
                del self._done[gen]
            else:
                self._done[gen][1] = left - 1
            return snap

    def _checked_exchange(self, rank: int, desc: tuple, data: object) -> dict[int, object]:
        entries = self.exchange(rank, (desc, data))
        descs = {r: d for r, (d, _) in entries.items()}
        if any(d != desc for d in descs.values()):
            with self._cv:
                self._poison_now(
                    f"collective mismatch across ranks (ordering bug): rank {rank} "
                    f"issued {desc}, peers issued {sorted(set(descs.values()), key=repr)}"
                )
            raise RendezvousTimeout(self._poison)
        return {r: data for r, (_, data) in entries.items()}

    def abort(self, reason: str) -> None:
        """Poison the group so peers blocked in a collective fail fast."""
        with self._cv:
            self._poison_now(reason)

    # -- collectives ---------------------------------------------------------

    def agree(self, rank: int, src: int, value: object, tag: str = "") -> object:
        """All ranks receive ``value`` as posted by ``src`` (control data only)."""
        if self.world_size == 1:
            return value
        entries = self._checked_exchange(rank, ("agree", tag, src), value if rank == src else None)
        return entries[src]

    def broadcast(
        self,
        rank: int,
        view: TensorView | None,
        src: int,
        pool: DevicePool | None = None,
        tag: str = "",
    ) -> TensorView:
        """Give every rank a view whose bytes equal the source view's.

        The source rank returns its existing view without copying; other
        ranks allocate a fresh buffer from their own pool. All ranks hold
        the result before anyone returns, so the source buffer may be
        consumed immediately afterwards. Only a span descriptor crosses
        threads, never the view object itself, so the source view's
        lifetime stays under the caller's control.
        """
        if not 0 <= src < self.world_size:
            raise ValueError(f"src {src} not in group of {self.world_size}")
        if self.world_size == 1:
            if view is None:
                raise SpecMismatch("broadcast source holds no view")
            return view

        desc = ("broadcast", tag, src)
        payload = _span_of(view) if rank == src else None
        entries = self._checked_exchange(rank, desc, payload)
        span = entries[src]
        if span is None:
            raise SpecMismatch(f"broadcast src rank {src} holds no view (tag={tag!r})")
        if rank == src:
            result = view
        else:
            if pool is None:
                raise ValueError("non-source ranks need a destination pool")
            result = _clone_full(span, pool, name=tag or "broadcast")
        self._checked_exchange(rank, ("broadcast-done", tag, src), None)
        return result

    def scatter(
        self,
        rank: int,
        spec: ShardSpec,
        src: int,
        source_view: TensorView | None = None,
        pool: DevicePool | None = None,
        tag: str = "",
    ) -> TensorView:
        """Give rank r a fresh contiguous copy of its slice along spec.dim.

        dim-0 slices are single contiguous ranges of the source; higher dims
        gather strided rows into contiguous destination memory.
        """
        if spec.world_size != self.world_size:
            raise SpecMismatch(
                f"spec is for world {spec.world_size}, group is {self.world_size}"
            )
        if self.world_size == 1:
            if source_view is None:
                raise SpecMismatch("scatter source holds no view")
            return source_view

        desc = ("scatter", tag, src, spec.dim, spec.full_shape)
        payload = _span_of(source_view) if rank == src else None
        entries = self._checked_exchange(rank, desc, payload)
        span = entries[src]
        if span is None:
            raise SpecMismatch(f"scatter src rank {src} holds no view (tag={tag!r})")
        if span.shape != spec.full_shape:
            raise SpecMismatch(
                f"source shape {list(span.shape)} does not match spec "
                f"{list(spec.full_shape)}"
            )
        if pool is None:
            raise ValueError("scatter needs a destination pool on every rank")
        lo, hi = spec.bounds(rank)
        result = _clone_slice(
            span, spec.dim, lo, hi, spec.part_shapes[rank], pool, name=tag or spec.key
        )
        self._checked_exchange(rank, ("scatter-done", tag, src), None)
        return result


class SingleGroup(ProcessGroup):
    """The world-size-1 group used by single-device programs."""

    def __init__(self):
        super().__init__(1)


@dataclass(frozen=True)
class _TensorSpan:
    """What actually crosses rank threads: a plain region descriptor."""

    buffer: DeviceBuffer
    offset: int
    dtype: DType
    shape: tuple[int, ...]

    @property
    def nbytes(self) -> int:
        n = self.dtype.size_bytes
        for d in self.shape:
            n *= d
        return n

    def as_numpy(self) -> np.ndarray:
        raw = self.buffer.array[self.offset : self.offset + self.nbytes]
        return raw.view(_np_unit(self.dtype)).reshape(self.shape)


def _np_unit(dtype: DType):
    # same-width unsigned views keep every dtype bit-exact, BOOL and BF16 included
    return {1: np.uint8, 2: np.uint16, 4: np.uint32, 8: np.uint64}[dtype.size_bytes]


def _span_of(view: TensorView | None) -> _TensorSpan | None:
    if view is None:
        return None
    return _TensorSpan(view.buffer, view.base_offset, view.dtype, tuple(view.shape))


def _fresh_view(
    pool: DevicePool,
    name: str,
    dtype: DType,
    shape: tuple[int, ...],
    raw: np.ndarray,
) -> TensorView:
    buf = pool.allocate(int(raw.nbytes))
    if raw.nbytes:
        buf.array[: raw.nbytes] = raw.reshape(-1).view(np.uint8)
    meta = TensorMetadata(
        name=name, dtype=dtype, shape=shape, data_offsets=(0, int(raw.nbytes))
    )
    return make_view(buf, 0, meta)


def _clone_full(span: _TensorSpan, pool: DevicePool, name: str) -> TensorView:
    raw = span.buffer.array[span.offset : span.offset + span.nbytes]
    return _fresh_view(pool, name, span.dtype, span.shape, raw)


def _clone_slice(
    span: _TensorSpan,
    dim: int,
    lo: int,
    hi: int,
    part_shape: tuple[int, ...],
    pool: DevicePool,
    name: str,
) -> TensorView:
    arr = span.as_numpy()  # bit-faithful element view
    index = (slice(None),) * dim + (slice(lo, hi),)
    sliced = np.ascontiguousarray(arr[index])
    return _fresh_view(pool, name, span.dtype, part_shape, sliced)
