"""Command-line tool: corpus generation, inspection, shard planning, and
load benchmarking.

Exit codes: 0 success, 1 format error, 2 I/O error, 3 collective/ordering
error (4 for anything else, including a failed benchmark verification).
The failing error's type name is printed on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import threading
import time
from pathlib import Path

import numpy as np

from .collective import ProcessGroup, partition
from .device import DIRECT_ALIGNMENT
from .errors import (
    AggloadError,
    BadDim,
    CollectiveError,
    DimTooSmall,
    EmptyFileList,
    FormatError,
    IoError,
)
from .format import DType, read_header, validate, write_file
from .loader import LoaderConfig, SafeTensorsFileLoader
from .reference import load_shard_bytes
from .transfer import DEFAULT_BLOCK_SIZE, DEFAULT_WORKER_CAP, Topology

TOPOLOGY_ENV = "AGGLOAD_TOPOLOGY"


def _parse_size(text: str) -> int:
    """Accept plain bytes or k/M/G suffixes (binary units)."""
    text = text.strip()
    mult = 1
    if text and text[-1] in "kKmMgG":
        mult = {"k": 1024, "m": 1024**2, "g": 1024**3}[text[-1].lower()]
        text = text[:-1]
    return int(text) * mult


def _load_topology(path: str | None) -> Topology | None:
    path = path or os.environ.get(TOPOLOGY_ENV)
    if not path:
        return None
    return Topology.from_json(Path(path).read_text())


# --- gen ---------------------------------------------------------------------


def _random_split(rng: np.random.Generator, total: int, max_parts: int = 6) -> list[int]:
    parts: list[int] = []
    remaining = total
    while remaining > 0 and len(parts) < max_parts - 1:
        take = int(rng.integers(1, remaining + 1))
        if take > remaining // 2 and len(parts) < max_parts - 2:
            take = max(1, remaining // 2)
        parts.append(take)
        remaining -= take
    if remaining:
        parts.append(remaining)
    return parts


def _shape_for(rng: np.random.Generator, numel: int) -> tuple[int, ...]:
    if numel == 0:
        return (0,)
    for divisor in rng.permutation(np.arange(2, 17)):
        d = int(divisor)
        if numel % d == 0 and numel // d > 0:
            return (d, numel // d)
    return (numel,)


def cmd_gen(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    dtype_pool = list(DType) if args.dtype == "mixed" else [DType.from_tag(args.dtype)]
    for i in range(args.files):
        tensors: dict[str, tuple[DType, tuple[int, ...], bytes]] = {}
        if args.pad_header is not None:
            # Single-tensor layout keeps the JSON small enough to pad down to
            # tiny forced header lengths.
            budget_parts = [args.bytes_per_file]
        else:
            budget_parts = _random_split(rng, args.bytes_per_file)
        t = 0
        for part in budget_parts:
            dtype = dtype_pool[int(rng.integers(0, len(dtype_pool)))]
            numel = part // dtype.size_bytes
            if numel == 0:
                dtype, numel = DType.U8, part
            used = numel * dtype.size_bytes
            leftover = part - used
            raw = rng.integers(0, 256, size=used, dtype=np.uint8).tobytes()
            tensors[f"f{i}_t{t}"] = (dtype, _shape_for(rng, numel), raw)
            t += 1
            if leftover:
                raw = rng.integers(0, 256, size=leftover, dtype=np.uint8).tobytes()
                tensors[f"f{i}_t{t}"] = (DType.U8, (leftover,), raw)
                t += 1
        pad = args.pad_header
        if pad is None:
            # Default to a 512-aligned body start; --pad-header forces the
            # odd-header path.
            natural = len(write_file(tensors)) - 8 - args.bytes_per_file
            pad = natural + (-(8 + natural) % DIRECT_ALIGNMENT)
        blob = write_file(tensors, pad_header_to=pad)
        (out / f"corpus_{i:03d}.safetensors").write_bytes(blob)
    print(f"wrote {args.files} file(s) of {args.bytes_per_file} body bytes each to {out}")
    return 0


# --- inspect -------------------------------------------------------------------


def cmd_inspect(args: argparse.Namespace) -> int:
    header = read_header(args.file)
    validate(header, header.file_size)
    doc = {
        "header_len": header.header_len,
        "body_offset": header.body_offset,
        "tensors": [
            {
                "name": meta.name,
                "dtype": meta.dtype.value,
                "shape": list(meta.shape),
                "data_offsets": list(meta.data_offsets),
            }
            for meta in header.tensors.values()
        ],
        "metadata": header.metadata,
    }
    json.dump(doc, sys.stdout, indent=2)
    print()
    return 0


# --- shard-plan ---------------------------------------------------------------


def cmd_shard_plan(args: argparse.Namespace) -> int:
    header = read_header(args.file)
    keys: dict[str, dict] = {}
    for name, meta in header.tensors.items():
        try:
            keys[name] = partition(meta, args.dim, args.world_size).to_json()
        except (BadDim, DimTooSmall) as e:
            keys[name] = {"error": type(e).__name__, "detail": str(e)}
    json.dump(
        {"file": str(args.file), "world_size": args.world_size, "dim": args.dim, "keys": keys},
        sys.stdout,
        indent=2,
    )
    print()
    return 0


# --- bench -------------------------------------------------------------------


def _shardable(meta, dim: int, world: int) -> bool:
    return world > 1 and dim < len(meta.shape) and meta.shape[dim] >= world


def _drop_page_cache(paths: list[Path]) -> None:
    for path in paths:
        try:
            fd = os.open(path, os.O_RDONLY)
            try:
                os.posix_fadvise(fd, 0, 0, os.POSIX_FADV_DONTNEED)
            finally:
                os.close(fd)
        except OSError:
            pass  # best effort; page-cache control is not portable


class _RankOutcome:
    def __init__(self):
        self.elapsed = 0.0
        self.bytes = 0
        self.blocks = 0
        self.workers = 0
        self.cross_numa = 0
        self.files = 0
        self.verified = True
        self.error: BaseException | None = None


def _bench_rep(
    mapping: dict[int, list[str]],
    args: argparse.Namespace,
    topology: Topology | None,
    verify: bool,
) -> tuple[float, list[_RankOutcome]]:
    world = args.world_size
    group = ProcessGroup(world)
    outcomes = [_RankOutcome() for _ in range(world)]

    def rank_main(rank: int) -> None:
        outcome = outcomes[rank]
        try:
            cfg = LoaderConfig(
                backend=args.backend,
                auto_release=args.auto_release,
                worker_cap=args.workers,
                block_size=args.block_size,
                topology=topology,
            )
            loader = SafeTensorsFileLoader(group, rank=rank, config=cfg)
            t0 = time.perf_counter()
            loader.add_filenames(mapping)
            fb = loader.copy_files_to_device()
            keys = sorted(fb.keys())
            views = {}
            for key in keys:
                meta = fb.metadata(key)
                if _shardable(meta, args.dim, world):
                    views[key] = (fb.get_sharded(key, args.dim), True)
                else:
                    views[key] = (fb.get_tensor(key), False)
            outcome.elapsed = time.perf_counter() - t0
            stats = loader.last_transfer_stats
            if stats is not None:
                outcome.bytes = stats.bytes
                outcome.blocks = stats.blocks
                outcome.workers = stats.workers
                outcome.cross_numa = stats.cross_numa_blocks
            outcome.files = len(mapping.get(rank, []))
            if verify:
                outcome.verified = _verify_rank(fb, views, rank, world, args.dim)
            fb.close()
            loader.close()
        except BaseException as e:  # noqa: BLE001 - surfaced by driver
            outcome.error = e
            group.abort(f"rank {rank} failed: {type(e).__name__}: {e}")

    threads = [threading.Thread(target=rank_main, args=(r,), daemon=True) for r in range(world)]
    wall0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    wall = time.perf_counter() - wall0
    errors = [o.error for o in outcomes if o.error is not None]
    if errors:
        from .errors import RendezvousTimeout

        # a timeout is usually collateral damage from another rank's failure
        primary = [e for e in errors if not isinstance(e, RendezvousTimeout)]
        raise (primary or errors)[0]
    return wall, outcomes


def _verify_rank(fb, views, rank: int, world: int, dim: int) -> bool:
    for key, (view, sharded) in views.items():
        info = fb._index[key]
        if sharded:
            shape, expect = load_shard_bytes(info.file_id, key, dim, world, rank)
            if tuple(shape) != tuple(view.shape) or view.tobytes() != expect:
                return False
        else:
            from .reference import load_tensor_bytes

            _, expect = load_tensor_bytes(info.file_id, key)
            if view.tobytes() != expect:
                return False
    return True


def cmd_bench(args: argparse.Namespace) -> int:
    corpus = sorted(Path(args.dir).glob("*.safetensors"))
    if not corpus:
        raise EmptyFileList(f"no .safetensors files under {args.dir}")
    mapping: dict[int, list[str]] = {r: [] for r in range(args.world_size)}
    for i, path in enumerate(corpus):
        mapping[i % args.world_size].append(str(path))
    topology = _load_topology(args.topology)

    if args.cold:
        _drop_page_cache(corpus)
    else:
        _bench_rep(mapping, args, topology, verify=False)  # warm the cache, untimed

    walls: list[float] = []
    outcomes: list[_RankOutcome] = []
    for rep in range(args.repeat):
        if args.cold and rep > 0:
            _drop_page_cache(corpus)
        wall, rep_outcomes = _bench_rep(mapping, args, topology, verify=(rep == 0))
        if rep == 0 and not all(o.verified for o in rep_outcomes):
            print("verification failed: loader output differs from the reference loader",
                  file=sys.stderr)
            return 4
        walls.append(wall)
        outcomes = rep_outcomes

    elapsed = statistics.median(walls)
    total_bytes = sum(o.bytes for o in outcomes)
    report = {
        "elapsed_seconds": elapsed,
        "bytes": total_bytes,
        "throughput_bytes_per_sec": total_bytes / elapsed if elapsed > 0 else 0.0,
        "workers": max((o.workers for o in outcomes), default=0),
        "block_size": args.block_size,
        "backend": args.backend,
        "world_size": args.world_size,
        "per_rank": [
            {
                "rank": r,
                "files": o.files,
                "bytes": o.bytes,
                "blocks": o.blocks,
                "workers": o.workers,
                "elapsed_seconds": o.elapsed,
                "throughput_bytes_per_sec": o.bytes / o.elapsed if o.elapsed > 0 else 0.0,
            }
            for r, o in enumerate(outcomes)
        ],
        "cross_numa_blocks": sum(o.cross_numa for o in outcomes),
    }
    json.dump(report, sys.stdout, indent=2)
    print()
    return 0


# --- entry -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aggload",
        description="Aggregated safetensors loading: generate, inspect, shard-plan, bench.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a deterministic synthetic corpus")
    p.add_argument("--files", type=int, default=2)
    p.add_argument("--bytes-per-file", type=_parse_size, default=1024 * 1024)
    p.add_argument("--dtype", default="F32", choices=[d.value for d in DType] + ["mixed"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pad-header", type=int, default=None,
                   help="absolute JSON header length (body_offset becomes 8 + this)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("inspect", help="dump a file's header as JSON")
    p.add_argument("file")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("shard-plan", help="dump per-key shard shapes as JSON")
    p.add_argument("file")
    p.add_argument("--world-size", type=int, default=2)
    p.add_argument("--dim", type=int, default=0)
    p.set_defaults(fn=cmd_shard_plan)

    p = sub.add_parser("bench", help="run the full pipeline over a corpus and report")
    p.add_argument("--dir", required=True)
    p.add_argument("--backend", default="host", choices=["host", "simdirect"])
    p.add_argument("--workers", type=int, default=DEFAULT_WORKER_CAP)
    p.add_argument("--block-size", type=_parse_size, default=DEFAULT_BLOCK_SIZE)
    p.add_argument("--world-size", type=int, default=1)
    p.add_argument("--dim", type=int, default=0)
    p.add_argument("--topology", default=None,
                   help=f"topology JSON path (or set {TOPOLOGY_ENV})")
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--auto-release", action="store_true",
                   help="enable per-file buffer auto-release during retrieval")
    p.add_argument("--cold", action="store_true",
                   help="skip the warm-up pass and advise pages out "
                        "(page-cache eviction is best-effort only)")
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FormatError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except (IoError, EmptyFileList, OSError) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except CollectiveError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 3
    except AggloadError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
