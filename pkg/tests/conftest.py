"""Shared helpers: randomized safetensors corpora and a rank-thread runner."""

from __future__ import annotations

import threading
from pathlib import Path

import numpy as np
import pytest

from aggload.format import DType, write_file

ALL_DTYPES = list(DType)

# Skewed toward small dims so random rank-4 shapes stay test-sized.
_DIM_CHOICES = [0, 1, 1, 2, 2, 3, 3, 4, 5, 7, 8, 13, 16, 64]


def random_shape(rng: np.random.Generator, max_rank: int = 4, max_numel: int | None = None) -> tuple[int, ...]:
    rank = int(rng.integers(0, max_rank + 1))
    shape = tuple(int(rng.choice(_DIM_CHOICES)) for _ in range(rank))
    if max_numel is not None:
        while int(np.prod(shape, dtype=np.int64)) > max_numel:
            shape = tuple(min(d, 4) for d in shape)
    return shape


def random_tensor_set(
    rng: np.random.Generator,
    n_tensors: int,
    prefix: str = "t",
    dtypes: list[DType] | None = None,
    max_rank: int = 4,
    max_numel: int | None = 65536,
) -> dict[str, tuple[DType, tuple[int, ...], bytes]]:
    """Build a name -> (dtype, shape, raw bytes) mapping for write_file."""
    dtypes = dtypes or ALL_DTYPES
    out: dict[str, tuple[DType, tuple[int, ...], bytes]] = {}
    for i in range(n_tensors):
        dtype = dtypes[int(rng.integers(0, len(dtypes)))]
        shape = random_shape(rng, max_rank, max_numel)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.size_bytes if shape else dtype.size_bytes
        if not shape:
            nbytes = dtype.size_bytes
        raw = rng.integers(0, 256, size=nbytes, dtype=np.uint8).tobytes()
        out[f"{prefix}{i}"] = (dtype, shape, raw)
    return out


def write_corpus_file(
    path: Path,
    rng: np.random.Generator,
    n_tensors: int,
    prefix: str,
    pad_header_to: int | None = None,
    dtypes: list[DType] | None = None,
) -> dict[str, tuple[DType, tuple[int, ...], bytes]]:
    tensors = random_tensor_set(rng, n_tensors, prefix=prefix, dtypes=dtypes)
    path.write_bytes(write_file(tensors, pad_header_to=pad_header_to))
    return tensors


def pad_for_body_residue(tensors: dict, residue: int) -> int:
    """Pick pad_header_to so body_offset % 512 == residue for these tensors."""
    import json

    layout = {
        name: {"dtype": dt.value, "shape": list(shape), "data_offsets": [0, 0]}
        for name, (dt, shape, _) in tensors.items()
    }
    natural = len(json.dumps(layout, separators=(",", ":")).encode())
    # data_offsets digits can only grow the document; overshoot generously.
    base = natural + 128
    pad = base + (residue - (8 + base) % 512) % 512
    return pad


class RankFailure(Exception):
    """Wraps the first exception raised inside a rank thread."""

    def __init__(self, rank: int, exc: BaseException):
        super().__init__(f"rank {rank} raised {type(exc).__name__}: {exc}")
        self.rank = rank
        self.exc = exc


def run_ranks(world_size: int, fn, join_timeout: float = 60.0) -> list:
    """Run fn(rank) on world_size threads; return per-rank results.

    Raises RankFailure for the lowest-numbered failing rank once all
    threads have stopped, so collective error paths stay observable.
    """
    results: list = [None] * world_size
    failures: dict[int, BaseException] = {}

    def runner(rank: int) -> None:
        try:
            results[rank] = fn(rank)
        except BaseException as e:  # noqa: BLE001 - re-raised below
            failures[rank] = e

    threads = [threading.Thread(target=runner, args=(r,), daemon=True) for r in range(world_size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(join_timeout)
    alive = [t for t in threads if t.is_alive()]
    if alive:
        raise TimeoutError(f"{len(alive)} rank thread(s) still running after {join_timeout}s")
    if failures:
        from aggload.errors import RendezvousTimeout

        # a timeout is usually collateral damage from another rank's failure
        primary = [r for r, e in failures.items() if not isinstance(e, RendezvousTimeout)]
        rank = min(primary) if primary else min(failures)
        raise RankFailure(rank, failures[rank]) from failures[rank]
    return results


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0xA6610AD)
