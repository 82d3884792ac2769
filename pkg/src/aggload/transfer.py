"""Plan and execute aggregated, parallel file-to-device transfers.

Files are carved into fixed-size transfer blocks assigned round-robin to a
worker team sized by the thread-count rule (one thread per file, capped at
80% of a NUMA node's CPUs and a hard cap). Each worker copies its blocks
into per-file device buffers; block ranges are disjoint, so workers never
contend on bytes and the result is bitwise independent of the worker count.
"""

from __future__ import annotations

import json
import math
import os
import threading
import time
from dataclasses import dataclass, field
import numpy as np

from .device import BackendKind, DeviceBackend, DeviceBuffer, DevicePool
from .errors import EmptyFileList, IoError, UnknownNode

__all__ = [
    "NumaNode",
    "Topology",
    "FileSpec",
    "TransferBlock",
    "TransferPlan",
    "PlanStats",
    "TransferResult",
    "DEFAULT_BLOCK_SIZE",
    "DEFAULT_WORKER_CAP",
    "worker_count",
    "build_plan",
    "execute_plan",
]

DEFAULT_BLOCK_SIZE = 160 * 1024 * 1024  # per-worker staging chunk
DEFAULT_WORKER_CAP = 16
CPU_FRACTION = 0.8  # never occupy more than this share of a node's CPUs


@dataclass(frozen=True)
class NumaNode:
    node_id: int
    physical_cpus: int
    device_ids: tuple[int, ...] = ()
    storage_ids: tuple[int, ...] = ()


@dataclass(frozen=True)
class Topology:
    nodes: tuple[NumaNode, ...]

    def __post_init__(self):
        seen_nodes: set[int] = set()
        seen_dev: set[int] = set()
        seen_sto: set[int] = set()
        for n in self.nodes:
            if n.node_id in seen_nodes:
                raise ValueError(f"duplicate node_id {n.node_id}")
            seen_nodes.add(n.node_id)
            for d in n.device_ids:
                if d in seen_dev:
                    raise ValueError(f"device {d} appears on two nodes")
                seen_dev.add(d)
            for s in n.storage_ids:
                if s in seen_sto:
                    raise ValueError(f"storage {s} appears on two nodes")
                seen_sto.add(s)

    def node(self, node_id: int) -> NumaNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise UnknownNode(f"no NUMA node {node_id} in topology")

    def node_of_storage(self, storage_id: int) -> NumaNode | None:
        for n in self.nodes:
            if storage_id in n.storage_ids:
                return n
        return None

    def node_of_device(self, device_id: int) -> NumaNode | None:
        for n in self.nodes:
            if device_id in n.device_ids:
                return n
        return None

    @classmethod
    def single_node(cls, device_ids: tuple[int, ...] = (0,), storage_ids: tuple[int, ...] = (0,)) -> "Topology":
        cpus = os.cpu_count() or 1
        return cls((NumaNode(0, cpus, tuple(device_ids), tuple(storage_ids)),))

    @classmethod
    def from_json(cls, doc: str | dict) -> "Topology":
        if isinstance(doc, str):
            doc = json.loads(doc)
        nodes = tuple(
            NumaNode(
                node_id=int(n["node_id"]),
                physical_cpus=int(n["physical_cpus"]),
                device_ids=tuple(int(d) for d in n.get("device_ids", [])),
                storage_ids=tuple(int(s) for s in n.get("storage_ids", [])),
            )
            for n in doc["nodes"]
        )
        return cls(nodes)

    def to_json(self) -> dict:
        return {
            "nodes": [
                {
                    "node_id": n.node_id,
                    "physical_cpus": n.physical_cpus,
                    "device_ids": list(n.device_ids),
                    "storage_ids": list(n.storage_ids),
                }
                for n in self.nodes
            ]
        }


@dataclass(frozen=True)
class FileSpec:
    """One input file: its path doubles as the file id."""

    file_id: str
    size: int
    storage_id: int = 0
    body_offset: int = 0


@dataclass(frozen=True)
class TransferBlock:
    file_id: str
    file_off: int
    len: int
    buffer_id: int
    dev_off: int
    worker_id: int


@dataclass(frozen=True)
class BufferSpec:
    buffer_id: int
    file_id: str
    size: int
    device_id: int
    storage_node: int | None


@dataclass(frozen=True)
class TransferPlan:
    blocks: tuple[TransferBlock, ...]
    buffers: tuple[BufferSpec, ...]
    workers: int
    affinity: tuple[tuple[int, int], ...]  # (worker_id, node_id)
    backend: DeviceBackend
    cross_numa_blocks: int

    @property
    def total_bytes(self) -> int:
        return sum(b.len for b in self.blocks)


@dataclass
class PlanStats:
    bytes: int
    elapsed_seconds: float
    workers: int
    blocks: int
    cross_numa_blocks: int
    per_worker_bytes: list[int] = field(default_factory=list)

    @property
    def throughput_bytes_per_sec(self) -> float:
        return self.bytes / self.elapsed_seconds if self.elapsed_seconds > 0 else 0.0

    def to_json(self) -> dict:
        return {
            "bytes": self.bytes,
            "elapsed_seconds": self.elapsed_seconds,
            "throughput_bytes_per_sec": self.throughput_bytes_per_sec,
            "workers": self.workers,
            "blocks": self.blocks,
            "cross_numa_blocks": self.cross_numa_blocks,
        }


@dataclass
class TransferResult:
    buffers: dict[str, DeviceBuffer]
    stats: PlanStats


def worker_count(num_files: int, topology: Topology, node: int, cap: int = DEFAULT_WORKER_CAP) -> int:
    """I/O thread sizing: one per file, bounded by 80% of the node's CPUs
    and the configured cap (never below one)."""
    cpus = topology.node(node).physical_cpus
    return max(1, min(num_files, math.floor(CPU_FRACTION * cpus), cap))


def _aligned_start(spec: FileSpec, backend: DeviceBackend) -> int:
    if backend.kind is BackendKind.SIM_DIRECT:
        align = backend.transfer_alignment
        return (spec.body_offset // align) * align
    return spec.body_offset


def build_plan(
    files: list[FileSpec],
    backend: DeviceBackend | str,
    block_size: int = DEFAULT_BLOCK_SIZE,
    topology: Topology | None = None,
    target_devices: list[int] | None = None,
    worker_cap: int = DEFAULT_WORKER_CAP,
    min_buffer_bytes: dict[str, int] | None = None,
) -> TransferPlan:
    """Partition files into transfer blocks and assign them to workers.

    Each file gets one device buffer covering its transferred range (the
    body, extended down to the 512 floor for the direct backend so the
    phenomenon of tensors landing at odd offsets is preserved), placed
    round-robin over ``target_devices``. Blocks go round-robin to workers;
    workers are pinned to the storage-side NUMA node when the topology knows
    it, else the device-side node.
    """
    if not files:
        raise EmptyFileList("no files to transfer")
    if block_size <= 0:
        raise ValueError(f"block_size must be positive, got {block_size}")
    backend = DeviceBackend.of(backend)
    topology = topology or Topology.single_node()
    target_devices = list(target_devices) if target_devices else [0]
    min_buffer_bytes = min_buffer_bytes or {}

    if backend.kind is BackendKind.SIM_DIRECT:
        align = backend.transfer_alignment
        block_size = -(-block_size // align) * align

    ordered = sorted(files, key=lambda f: (f.storage_id, f.file_id))

    node_hint: NumaNode | None = None
    for spec in ordered:
        node_hint = topology.node_of_storage(spec.storage_id)
        if node_hint:
            break
    if node_hint is None:
        node_hint = topology.node_of_device(target_devices[0]) or topology.nodes[0]
    workers = worker_count(len(ordered), topology, node_hint.node_id, worker_cap)

    buffers: list[BufferSpec] = []
    raw_blocks: list[tuple[str, int, int, int, int]] = []  # file_id, file_off, len, buffer_id, dev_off
    for i, spec in enumerate(ordered):
        start = _aligned_start(spec, backend)
        extent = max(0, spec.size - start)
        storage_node = topology.node_of_storage(spec.storage_id)
        buffers.append(
            BufferSpec(
                buffer_id=i,
                file_id=spec.file_id,
                size=max(extent, min_buffer_bytes.get(spec.file_id, 0)),
                device_id=target_devices[i % len(target_devices)],
                storage_node=storage_node.node_id if storage_node else None,
            )
        )
        for off in range(start, spec.size, block_size):
            length = min(block_size, spec.size - off)
            raw_blocks.append((spec.file_id, off, length, i, off - start))

    blocks: list[TransferBlock] = []
    cross = 0
    affinity: dict[int, int] = {}
    for seq, (file_id, file_off, length, buffer_id, dev_off) in enumerate(raw_blocks):
        worker = seq % workers
        blocks.append(TransferBlock(file_id, file_off, length, buffer_id, dev_off, worker))
        bufspec = buffers[buffer_id]
        dev_node = topology.node_of_device(bufspec.device_id)
        if worker not in affinity:
            affinity[worker] = (
                bufspec.storage_node
                if bufspec.storage_node is not None
                else (dev_node.node_id if dev_node else node_hint.node_id)
            )
        if (
            bufspec.storage_node is not None
            and dev_node is not None
            and bufspec.storage_node != dev_node.node_id
        ):
            cross += 1
    for w in range(workers):
        affinity.setdefault(w, node_hint.node_id)

    return TransferPlan(
        blocks=tuple(blocks),
        buffers=tuple(buffers),
        workers=workers,
        affinity=tuple(sorted(affinity.items())),
        backend=backend,
        cross_numa_blocks=cross,
    )


def execute_plan(
    plan: TransferPlan,
    pools: DevicePool | dict[int, DevicePool],
) -> TransferResult:
    """Run all transfers with the plan's worker team.

    Workers write disjoint device ranges, so completion is a plain join. On
    any failure the partially filled buffers are discarded (freed outright,
    not pooled) and the error propagates.
    """
    if isinstance(pools, DevicePool):
        pools = {spec.device_id: pools for spec in plan.buffers}

    allocated: dict[int, DeviceBuffer] = {}
    try:
        for spec in plan.buffers:
            allocated[spec.buffer_id] = pools[spec.device_id].allocate(spec.size)
    except Exception:
        for buf in allocated.values():
            buf.release(force=True, to_pool=False)
        raise

    per_worker: dict[int, list[TransferBlock]] = {}
    for block in plan.blocks:
        per_worker.setdefault(block.worker_id, []).append(block)

    failures: list[BaseException] = []
    per_worker_bytes = [0] * plan.workers

    def run_worker(worker_id: int, work: list[TransferBlock]) -> None:
        fds: dict[str, int] = {}
        staging = None
        if plan.backend.kind is BackendKind.HOST and work:
            staging = np.empty(
                min(plan.backend.bounce_buffer_bytes, max(b.len for b in work)),
                dtype=np.uint8,
            )
        try:
            for block in work:
                fd = fds.get(block.file_id)
                if fd is None:
                    try:
                        fd = os.open(block.file_id, os.O_RDONLY)
                    except OSError as e:
                        raise IoError(f"cannot open {block.file_id}: {e}") from e
                    fds[block.file_id] = fd
                from .device import transfer_from_file

                transfer_from_file(
                    allocated[block.buffer_id], block.dev_off, fd, block.file_off,
                    block.len, staging=staging,
                )
                per_worker_bytes[worker_id] += block.len
        except BaseException as e:  # noqa: BLE001 - surfaced after join
            failures.append(e)
        finally:
            for fd in fds.values():
                os.close(fd)

    started = time.perf_counter()
    threads = [
        threading.Thread(target=run_worker, args=(wid, work), daemon=True)
        for wid, work in sorted(per_worker.items())
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - started

    if failures:
        for buf in allocated.values():
            buf.release(force=True, to_pool=False)
        raise failures[0]

    stats = PlanStats(
        bytes=plan.total_bytes,
        elapsed_seconds=elapsed,
        workers=plan.workers,
        blocks=len(plan.blocks),
        cross_numa_blocks=plan.cross_numa_blocks,
        per_worker_bytes=per_worker_bytes,
    )
    buffers = {spec.file_id: allocated[spec.buffer_id] for spec in plan.buffers}
    return TransferResult(buffers=buffers, stats=stats)
