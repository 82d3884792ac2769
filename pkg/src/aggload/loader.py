"""High-level loading API: map files to ranks, bulk-copy them onto devices,
then retrieve tensors with broadcast/scatter shuffling.

Usage mirrors the single- and multi-device flows:

    loader = SafeTensorsFileLoader(SingleGroup(), "host")
    loader.add_filenames({0: ["a.safetensors"]})
    fb = loader.copy_files_to_device()
    t = fb.get_tensor("a0")
    fb.close(); loader.close()

Every rank runs the same calls in the same order; retrieval methods are
rendezvous points. One loader instance belongs to one rank thread and none
of its methods may be called concurrently from two threads of that rank.
"""

from __future__ import annotations

import logging
import weakref
from dataclasses import dataclass
from pathlib import Path

from .collective import ProcessGroup, partition
from .device import (
    DEFAULT_ALIGN_BOUNCE,
    DEFAULT_HOST_BOUNCE,
    BackendKind,
    DeviceBackend,
    DeviceBuffer,
    DevicePool,
    align_fix,
)
from .errors import (
    DuplicateKey,
    EmptyFileList,
    IoError,
    StaleKey,
    UnknownKey,
    UseAfterClose,
)
from .format import DEFAULT_HEADER_CAP, FileHeader, TensorMetadata, read_header, validate
from .tensorview import TensorView, make_view
from .transfer import (
    DEFAULT_BLOCK_SIZE,
    DEFAULT_WORKER_CAP,
    FileSpec,
    PlanStats,
    Topology,
    build_plan,
    execute_plan,
)

__all__ = ["LoaderConfig", "SafeTensorsFileLoader", "FilesBufferOnDevice"]

logger = logging.getLogger("aggload")

SKEW_RATIO = 2.0  # warn when max/min per-rank bytes exceeds this


@dataclass
class LoaderConfig:
    backend: str | DeviceBackend = "host"
    auto_release: bool = True
    worker_cap: int = DEFAULT_WORKER_CAP
    block_size: int = DEFAULT_BLOCK_SIZE
    host_bounce_bytes: int = DEFAULT_HOST_BOUNCE
    align_bounce_bytes: int = DEFAULT_ALIGN_BOUNCE
    rendezvous_timeout: float | None = None  # None keeps the group's setting
    topology: Topology | None = None
    device_cap: int | None = None
    header_cap: int = DEFAULT_HEADER_CAP


@dataclass
class _KeyInfo:
    owner: int
    file_id: str
    meta: TensorMetadata


@dataclass
class _HostedFile:
    buffer: DeviceBuffer
    dev_offsets: dict[str, int]
    unconsumed: int


def _resolve_backend(device: str | DeviceBackend | None, config: LoaderConfig) -> DeviceBackend:
    choice = device if device is not None else config.backend
    if isinstance(choice, DeviceBackend):
        return choice
    kind = BackendKind(str(choice).lower())
    if kind is BackendKind.HOST:
        return DeviceBackend.host(config.host_bounce_bytes)
    return DeviceBackend.sim_direct(config.align_bounce_bytes)


class SafeTensorsFileLoader:
    """Per-rank entry point; construct one on every rank of ``group``."""

    def __init__(
        self,
        group: ProcessGroup,
        device: str | DeviceBackend | None = None,
        rank: int = 0,
        config: LoaderConfig | None = None,
    ):
        self.config = config or LoaderConfig()
        self.group = group
        self.rank = rank
        if not 0 <= rank < group.world_size:
            raise ValueError(f"rank {rank} not in group of world size {group.world_size}")
        if self.config.rendezvous_timeout is not None:
            group.timeout = self.config.rendezvous_timeout
        self.backend = _resolve_backend(device, self.config)
        self.device_id = rank
        self.pool = DevicePool(self.backend, device_id=rank, capacity_cap=self.config.device_cap)
        self.topology = self.config.topology or Topology.single_node(
            device_ids=tuple(range(group.world_size))
        )
        self._files: dict[int, list[str]] = {}
        self._headers: dict[str, FileHeader] = {}
        self._key_index: dict[str, _KeyInfo] = {}
        self._fb: FilesBufferOnDevice | None = None
        self._closed = False
        self.skew_warning: str | None = None
        self.last_transfer_stats: PlanStats | None = None

    def _check_open(self) -> None:
        if self._closed:
            raise UseAfterClose("loader was closed")

    def add_filenames(self, mapping: dict[int, list[str | Path]]) -> None:
        """Map files to owning ranks; identical on all ranks.

        Headers are parsed and validated eagerly so transfer planning knows
        every byte range up front, and so format errors surface here rather
        than mid-transfer.
        """
        self._check_open()
        for rank_id, paths in sorted(mapping.items()):
            if not 0 <= rank_id < self.group.world_size:
                raise ValueError(
                    f"mapping rank {rank_id} outside world of {self.group.world_size}"
                )
            for path in paths:
                path = str(path)
                try:
                    header = read_header(path, header_cap=self.config.header_cap)
                except OSError as e:
                    raise IoError(f"cannot read {path}: {e}") from e
                validate(header, header.file_size)
                if path in self._headers:
                    raise DuplicateKey(f"file {path} mapped twice")
                for key in header.tensors:
                    if key in self._key_index:
                        raise DuplicateKey(
                            f"tensor key {key!r} appears in both "
                            f"{self._key_index[key].file_id} and {path}"
                        )
                self._headers[path] = header
                for key, meta in header.tensors.items():
                    self._key_index[key] = _KeyInfo(owner=rank_id, file_id=path, meta=meta)
                self._files.setdefault(rank_id, []).append(path)
        self._note_skew()

    def _note_skew(self) -> None:
        totals = {
            r: sum(self._headers[p].file_size or 0 for p in self._files.get(r, []))
            for r in range(self.group.world_size)
        }
        if len(totals) < 2:
            return
        top, bottom = max(totals.values()), min(totals.values())
        if top > 0 and (bottom == 0 or top / bottom > SKEW_RATIO):
            self.skew_warning = (
                f"skewed data placement may degrade performance: per-rank bytes {totals}"
            )
            logger.warning(self.skew_warning)

    def _repack_extent(self, header: FileHeader, start: int) -> int:
        """Worst-case bytes the alignment repack needs; sizes the buffer so
        the in-place fix always has room even for tightly packed bodies."""
        landings = sorted(
            ((header.body_offset + m.begin - start, m) for m in header.tensors.values()),
            key=lambda e: e[0],
        )
        cursor = 0
        for _, meta in landings:
            align = meta.dtype.alignment
            cursor = -(-cursor // align) * align + meta.nbytes
        return cursor

    def copy_files_to_device(self) -> "FilesBufferOnDevice":
        """Transfer this rank's files onto its device and index every tensor.

        Tensor bytes land per the transfer plan, the alignment fix then
        repacks any tensor that did not land dtype-aligned (always the case
        for odd headers on the direct backend), and the returned handle
        resolves keys to device offsets. Tensors exist only on their owning
        rank until shuffled.
        """
        self._check_open()
        if not self._key_index and not any(self._files.values()):
            raise EmptyFileList("add_filenames mapped no files")

        my_files = self._files.get(self.rank, [])
        hosted: dict[str, _HostedFile] = {}
        if my_files:
            specs = []
            min_bytes = {}
            for path in my_files:
                header = self._headers[path]
                spec = FileSpec(
                    file_id=path,
                    size=header.file_size or 0,
                    storage_id=0,
                    body_offset=header.body_offset,
                )
                specs.append(spec)
                start = self._transfer_start(header)
                min_bytes[path] = self._repack_extent(header, start)
            plan = build_plan(
                specs,
                self.backend,
                block_size=self.config.block_size,
                topology=self.topology,
                target_devices=[self.device_id],
                worker_cap=self.config.worker_cap,
                min_buffer_bytes=min_bytes,
            )
            result = execute_plan(plan, {self.device_id: self.pool})
            self.last_transfer_stats = result.stats

            for path in my_files:
                header = self._headers[path]
                buf = result.buffers[path]
                start = self._transfer_start(header)
                landing = [
                    (key, header.body_offset + meta.begin - start, meta)
                    for key, meta in header.tensors.items()
                ]
                try:
                    table = align_fix(buf, landing, self.config.align_bounce_bytes)
                except Exception:
                    for b in result.buffers.values():
                        if not b.released:
                            b.release(force=True, to_pool=False)
                    raise
                buf.refcount = len(landing)
                hosted[path] = _HostedFile(
                    buffer=buf,
                    dev_offsets=dict(table),
                    unconsumed=len(landing),
                )

        fb = FilesBufferOnDevice(self, hosted)
        self._fb = fb
        return fb

    def _transfer_start(self, header: FileHeader) -> int:
        if self.backend.kind is BackendKind.SIM_DIRECT:
            align = self.backend.transfer_alignment
            return (header.body_offset // align) * align
        return header.body_offset

    def close(self) -> None:
        """Idempotent teardown: closes the device handle and the group ref."""
        if self._closed:
            return
        if self._fb is not None:
            self._fb.close()
        self._closed = True


class FilesBufferOnDevice:
    """Per-rank handle over transferred file buffers and their tensor keys.

    Retrieval methods are collectives: every rank must call them with the
    same arguments in the same order. With auto-release on, a file's buffer
    returns to the device pool the moment its last key is consumed; the
    owning rank then hands back a fresh copy rather than a view into the
    released buffer.
    """

    def __init__(self, loader: SafeTensorsFileLoader, hosted: dict[str, _HostedFile]):
        self._loader = loader
        self._group = loader.group
        self._rank = loader.rank
        self._pool = loader.pool
        self._auto_release = loader.config.auto_release
        self._hosted = hosted
        self._index = loader._key_index
        self._consumed: set[str] = set()
        self._survivors: dict[str, weakref.ref] = {}
        self._copies: list[DeviceBuffer] = []
        self._closed = False

    # -- introspection -------------------------------------------------------

    def keys(self) -> list[str]:
        return list(self._index)

    def metadata(self, key: str) -> TensorMetadata:
        return self._info(key).meta

    def owner_rank(self, key: str) -> int:
        return self._info(key).owner

    @property
    def transferred_buffer_bytes(self) -> int:
        return sum(h.buffer.capacity for h in self._hosted.values())

    # -- retrieval -----------------------------------------------------------

    def get_tensor(self, key: str) -> TensorView:
        """Broadcast one tensor so every rank holds byte-identical data."""
        self._check_open()
        info = self._info(key)
        first = key not in self._consumed
        world = self._group.world_size

        if world == 1:
            return self._local_full(info, first)

        if not first:
            verdict = self._probe(info, want="full")
            if verdict == "stale":
                raise StaleKey(f"key {key!r} was consumed and no view survives")
            src_view = self._source_view(info, verdict)
            result = self._group.broadcast(
                self._rank, src_view, src=info.owner, pool=self._pool, tag=key
            )
            if self._rank == info.owner:
                if self._auto_release and verdict == "buffer":
                    result = self._clone_of(result, key)
            else:
                self._copies.append(result.buffer)
            del src_view
            self._remember(key, result)
            return result

        if self._rank == info.owner:
            hosted = self._hosted[info.file_id]
            src_view = make_view(hosted.buffer, hosted.dev_offsets[key], info.meta)
            result = self._group.broadcast(
                self._rank, src_view, src=info.owner, pool=self._pool, tag=key
            )
            if self._auto_release:
                result = self._clone_of(src_view, key)
            src_view = None
            self._consume(info)
        else:
            result = self._group.broadcast(
                self._rank, None, src=info.owner, pool=self._pool, tag=key
            )
            self._copies.append(result.buffer)
            self._consumed.add(key)
        self._remember(key, result)
        return result

    def get_sharded(self, key: str, dim: int) -> TensorView:
        """Scatter one tensor: each rank receives its contiguous partition
        along ``dim``. A world of one receives the full tensor."""
        self._check_open()
        info = self._info(key)
        world = self._group.world_size
        first = key not in self._consumed

        if world == 1:
            partition(info.meta, dim, 1)  # dim validation, same errors as multi-rank
            return self._local_full(info, first)

        spec = partition(info.meta, dim, world)

        if not first:
            verdict = self._probe(info, want="shard")
            if verdict != "buffer":
                # Shard views cannot reconstruct the full tensor once the
                # source buffer is gone.
                raise StaleKey(f"key {key!r} was consumed and its source buffer released")
            src_view = self._source_view(info, verdict)
            result = self._group.scatter(
                self._rank, spec, info.owner, src_view, pool=self._pool, tag=key
            )
            del src_view
            self._copies.append(result.buffer)
            return result

        if self._rank == info.owner:
            hosted = self._hosted[info.file_id]
            src_view = make_view(hosted.buffer, hosted.dev_offsets[key], info.meta)
            result = self._group.scatter(
                self._rank, spec, info.owner, src_view, pool=self._pool, tag=key
            )
            src_view = None
            self._consume(info)
        else:
            result = self._group.scatter(
                self._rank, spec, info.owner, None, pool=self._pool, tag=key
            )
            self._consumed.add(key)
        self._copies.append(result.buffer)
        self._remember(key, result)
        return result

    def close(self) -> None:
        """Force-release every buffer this handle created; idempotent.

        Outstanding views are invalidated: reading through them afterwards
        raises UseAfterClose.
        """
        if self._closed:
            return
        for hostedfile in self._hosted.values():
            if not hostedfile.buffer.released:
                hostedfile.buffer.release(force=True)
        for buf in self._copies:
            if not buf.released:
                buf.release(force=True)
        self._closed = True

    # -- internals -----------------------------------------------------------

    def _check_open(self) -> None:
        if self._closed:
            raise UseAfterClose("FilesBufferOnDevice was closed")

    def _info(self, key: str) -> _KeyInfo:
        info = self._index.get(key)
        if info is None:
            raise UnknownKey(f"no tensor named {key!r} in the mapped files")
        return info

    def _local_full(self, info: _KeyInfo, first: bool) -> TensorView:
        key = info.meta.name
        if not first:
            hosted = self._hosted.get(info.file_id)
            if hosted is not None and not hosted.buffer.released:
                view = make_view(hosted.buffer, hosted.dev_offsets[key], info.meta)
                if self._auto_release:
                    clone = self._clone_of(view, key)
                    view = None
                    self._remember(key, clone)
                    return clone
                self._remember(key, view)
                return view
            survivor = self._survivors.get(key)
            alive = survivor() if survivor is not None else None
            if alive is None:
                raise StaleKey(f"key {key!r} was consumed and no view survives")
            return alive
        hosted = self._hosted[info.file_id]
        view = make_view(hosted.buffer, hosted.dev_offsets[key], info.meta)
        if self._auto_release:
            result = self._clone_of(view, key)
            view = None
        else:
            result = view
        self._consume(info)
        self._remember(key, result)
        return result

    def _probe(self, info: _KeyInfo, want: str) -> str:
        """Owner tells everyone how a repeated key can be served."""
        key = info.meta.name
        verdict = None
        if self._rank == info.owner:
            hosted = self._hosted[info.file_id]
            if not hosted.buffer.released:
                verdict = "buffer"
            else:
                survivor = self._survivors.get(key)
                alive = survivor() if survivor is not None else None
                verdict = "view" if alive is not None else "stale"
        return self._group.agree(
            self._rank, src=info.owner, value=verdict, tag=f"probe:{want}:{key}"
        )

    def _source_view(self, info: _KeyInfo, verdict: str) -> TensorView | None:
        if self._rank != info.owner:
            return None
        key = info.meta.name
        if verdict == "buffer":
            hosted = self._hosted[info.file_id]
            return make_view(hosted.buffer, hosted.dev_offsets[key], info.meta)
        return self._survivors[key]()

    def _clone_of(self, view: TensorView, key: str) -> TensorView:
        buf = self._pool.allocate(view.nbytes)
        if view.nbytes:
            src = view.buffer.array
            buf.array[: view.nbytes] = src[view.base_offset : view.base_offset + view.nbytes]
        meta = TensorMetadata(
            name=key, dtype=view.dtype, shape=view.shape, data_offsets=(0, view.nbytes)
        )
        self._copies.append(buf)
        return make_view(buf, 0, meta)

    def _consume(self, info: _KeyInfo) -> None:
        key = info.meta.name
        self._consumed.add(key)
        hosted = self._hosted[info.file_id]
        hosted.unconsumed -= 1
        hosted.buffer.refcount = hosted.unconsumed
        if self._auto_release and hosted.unconsumed == 0 and not hosted.buffer.released:
            hosted.buffer.release()

    def _remember(self, key: str, view: TensorView) -> None:
        self._survivors[key] = weakref.ref(view)
