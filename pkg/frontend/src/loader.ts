/** Scripting-side loader API over safetensors files.
 *
 * Mirrors the native surface: SingleGroup / SafeTensorsFileLoader /
 * add_filenames / copy_files_to_device / get_tensor / get_sharded / close.
 * Ranks are async tasks inside one process; retrieval methods are
 * rendezvous points and every rank must call them in the same order.
 * Tensors come back through the dense-array interchange convention:
 * a descriptor (device, dtype, shape, element strides) plus a TypedArray.
 */

import * as fs from "node:fs";

import {
  BadDim,
  DimTooSmall,
  DuplicateKey,
  RendezvousTimeout,
  SpecMismatch,
  UnknownKey,
  UseAfterClose,
} from "./errors.js";
import {
  DTYPE_ARRAYS,
  DTYPE_SIZES,
  DTypeTag,
  InterchangeArray,
  numel,
} from "./dtype.js";
import { FileHeader, TensorMeta, parseHeader, validateHeader } from "./format.js";

const DEFAULT_TIMEOUT_MS = 30_000;

// --- process group -----------------------------------------------------------

type Snapshot = Map<number, unknown>;

interface Waiter {
  deliver: (snap: Snapshot) => void;
  fail: (err: Error) => void;
  timer: NodeJS.Timeout;
}

export class ProcessGroup {
  readonly world_size: number;
  timeoutMs: number;
  private slots = new Map<number, unknown>();
  private waiters: Waiter[] = [];
  private poisoned: string | null = null;

  constructor(world_size: number, timeoutMs: number = DEFAULT_TIMEOUT_MS) {
    if (world_size < 1) throw new RangeError(`world_size must be >= 1, got ${world_size}`);
    this.world_size = world_size;
    this.timeoutMs = timeoutMs;
  }

  private poison(reason: string): void {
    this.poisoned = reason;
    for (const w of this.waiters.splice(0)) {
      clearTimeout(w.timer);
      w.fail(new RendezvousTimeout(reason));
    }
  }

  async exchange(rank: number, payload: unknown): Promise<Snapshot> {
    if (rank < 0 || rank >= this.world_size) {
      throw new RangeError(`rank ${rank} not in group of ${this.world_size}`);
    }
    if (this.world_size === 1) return new Map([[0, payload]]);
    if (this.poisoned) throw new RendezvousTimeout(this.poisoned);
    if (this.slots.has(rank)) {
      this.poison(`rank ${rank} issued a collective out of turn`);
      throw new RendezvousTimeout(this.poisoned!);
    }
    this.slots.set(rank, payload);
    if (this.slots.size === this.world_size) {
      const snap = new Map(this.slots);
      this.slots.clear();
      for (const w of this.waiters.splice(0)) {
        clearTimeout(w.timer);
        w.deliver(snap);
      }
      return snap;
    }
    return new Promise<Snapshot>((resolve, reject) => {
      const waiter: Waiter = {
        deliver: resolve,
        fail: reject,
        timer: setTimeout(() => {
          this.poison(
            `rank ${rank} timed out after ${this.timeoutMs}ms waiting for peers; ` +
            `a rank failed to arrive`,
          );
        }, this.timeoutMs),
      };
      this.waiters.push(waiter);
    });
  }

  async checked(rank: number, desc: unknown[], data: unknown): Promise<Snapshot> {
    const key = JSON.stringify(desc);
    const snap = await this.exchange(rank, [key, data]);
    const out = new Map<number, unknown>();
    for (const [r, entry] of snap) {
      const [otherKey, otherData] = entry as [string, unknown];
      if (otherKey !== key) {
        this.poison(`collective mismatch across ranks (ordering bug): ${key} vs ${otherKey}`);
        throw new RendezvousTimeout(this.poisoned!);
      }
      out.set(r, otherData);
    }
    return out;
  }
}

/** The world-size-1 group used by single-device programs. */
export function SingleGroup(): ProcessGroup {
  return new ProcessGroup(1);
}

// --- interchange tensor -------------------------------------------------------

export class BoundTensor {
  readonly device: string;
  readonly dtype: DTypeTag;
  readonly shape: number[];
  /** Strides in elements, the interchange convention; byteStrides are the
   * row-major byte strides they were converted from. */
  readonly strides: number[];
  readonly byteStrides: number[];
  readonly array: InterchangeArray;

  constructor(device: string, dtype: DTypeTag, shape: number[], array: InterchangeArray) {
    this.device = device;
    this.dtype = dtype;
    this.shape = shape;
    this.array = array;
    const size = DTYPE_SIZES[dtype];
    const byteStrides = new Array<number>(shape.length);
    let acc = size;
    for (let i = shape.length - 1; i >= 0; i--) {
      byteStrides[i] = acc;
      acc *= shape[i];
    }
    this.byteStrides = byteStrides;
    this.strides = byteStrides.map((b) => b / size);
  }

  descriptor(): Record<string, unknown> {
    return {
      device: this.device,
      dtype: this.dtype,
      shape: [...this.shape],
      strides: [...this.strides],
      data_address: this.array.byteOffset,
    };
  }

  at(...index: number[]): number | bigint {
    let flat = 0;
    for (let i = 0; i < this.shape.length; i++) flat += index[i] * this.strides[i];
    return this.array[flat];
  }

  toString(): string {
    const preview = Array.from(this.array.slice(0, 6) as ArrayLike<number | bigint>)
      .map(String).join(", ");
    const more = this.array.length > 6 ? ", ..." : "";
    return `tensor(${this.dtype}, shape=[${this.shape}], [${preview}${more}])`;
  }
}

// --- sharding helpers -----------------------------------------------------------

export interface ShardSpec {
  key: string;
  dim: number;
  world_size: number;
  fullShape: number[];
  partShapes: number[][];
}

export function partition(meta: TensorMeta, dim: number, world_size: number): ShardSpec {
  if (dim < 0 || dim >= meta.shape.length) {
    throw new BadDim(`dim ${dim} out of range for shape [${meta.shape}]`);
  }
  if (meta.shape[dim] < world_size) {
    throw new DimTooSmall(
      `cannot split dim ${dim} of size ${meta.shape[dim]} across ${world_size} ranks`,
    );
  }
  const base = Math.floor(meta.shape[dim] / world_size);
  const extra = meta.shape[dim] % world_size;
  const partShapes = Array.from({ length: world_size }, (_, r) => {
    const part = [...meta.shape];
    part[dim] = base + (r < extra ? 1 : 0);
    return part;
  });
  return { key: meta.name, dim, world_size, fullShape: [...meta.shape], partShapes };
}

function shardBounds(spec: ShardSpec, rank: number): [number, number] {
  let lo = 0;
  for (let r = 0; r < rank; r++) lo += spec.partShapes[r][spec.dim];
  return [lo, lo + spec.partShapes[rank][spec.dim]];
}

/** Copy [lo, hi) along `dim` of a row-major tensor into fresh contiguous
 * bytes. dim 0 is a single contiguous range; deeper dims gather row by row. */
function sliceAlongDim(
  src: Uint8Array,
  shape: number[],
  elemSize: number,
  dim: number,
  lo: number,
  hi: number,
): Uint8Array {
  let outer = 1;
  for (let i = 0; i < dim; i++) outer *= shape[i];
  let inner = elemSize;
  for (let i = dim + 1; i < shape.length; i++) inner *= shape[i];
  const out = new Uint8Array(outer * (hi - lo) * inner);
  let at = 0;
  for (let o = 0; o < outer; o++) {
    const start = (o * shape[dim] + lo) * inner;
    const end = (o * shape[dim] + hi) * inner;
    out.set(src.subarray(start, end), at);
    at += end - start;
  }
  return out;
}

// --- loader -------------------------------------------------------------------

interface KeyInfo {
  owner: number;
  file: string;
  meta: TensorMeta;
}

interface HostedFile {
  bytes: Uint8Array; // whole file in device memory, offset 0 in its own buffer
  header: FileHeader;
}

interface TensorLocator {
  bytes: Uint8Array;
  byteOffset: number;
  meta: TensorMeta;
}

export type FileMapping = Record<number, string[]>;

export class SafeTensorsFileLoader {
  readonly group: ProcessGroup;
  readonly rank: number;
  readonly device: string;
  private files = new Map<number, string[]>();
  private headers = new Map<string, FileHeader>();
  private index = new Map<string, KeyInfo>();
  private fb: FilesBufferOnDevice | null = null;
  private closed = false;

  constructor(group: ProcessGroup, device: string = "host", rank: number = 0) {
    if (rank < 0 || rank >= group.world_size) {
      throw new RangeError(`rank ${rank} not in group of ${group.world_size}`);
    }
    this.group = group;
    this.rank = rank;
    this.device = `${device}:${rank}`;
  }

  /** Map files to owning ranks; identical on every rank. Headers are read
   * and validated eagerly. */
  add_filenames(mapping: FileMapping): void {
    this.checkOpen();
    const ranks = Object.keys(mapping).map(Number).sort((a, b) => a - b);
    for (const r of ranks) {
      if (r < 0 || r >= this.group.world_size) {
        throw new RangeError(`mapping rank ${r} outside world of ${this.group.world_size}`);
      }
      for (const path of mapping[r]) {
        if (this.headers.has(path)) throw new DuplicateKey(`file ${path} mapped twice`);
        const header = readHeaderFromDisk(path);
        validateHeader(header, fs.statSync(path).size);
        for (const key of header.tensors.keys()) {
          const prior = this.index.get(key);
          if (prior) {
            throw new DuplicateKey(`tensor key ${key} appears in ${prior.file} and ${path}`);
          }
        }
        this.headers.set(path, header);
        for (const [key, meta] of header.tensors) {
          this.index.set(key, { owner: r, file: path, meta });
        }
        const list = this.files.get(r) ?? [];
        list.push(path);
        this.files.set(r, list);
      }
    }
  }

  /** Bulk-read this rank's files into device buffers and index every key. */
  async copy_files_to_device(): Promise<FilesBufferOnDevice> {
    this.checkOpen();
    const hosted = new Map<string, HostedFile>();
    for (const path of this.files.get(this.rank) ?? []) {
      const raw = fs.readFileSync(path);
      // normalize into a dedicated ArrayBuffer so element views can be
      // taken at predictable offsets
      const bytes = new Uint8Array(raw.byteLength);
      bytes.set(raw);
      hosted.set(path, { bytes, header: this.headers.get(path)! });
    }
    this.fb = new FilesBufferOnDevice(this, hosted, this.index);
    return this.fb;
  }

  close(): void {
    if (this.closed) return;
    this.fb?.close();
    this.closed = true;
  }

  private checkOpen(): void {
    if (this.closed) throw new UseAfterClose("loader was closed");
  }
}

function readHeaderFromDisk(path: string): FileHeader {
  const fd = fs.openSync(path, "r");
  try {
    const prefix = new Uint8Array(8);
    fs.readSync(fd, prefix, 0, 8, 0);
    const headerLen = Number(new DataView(prefix.buffer).getBigUint64(0, true));
    const all = new Uint8Array(8 + headerLen);
    all.set(prefix);
    fs.readSync(fd, all, 8, headerLen, 8);
    return parseHeader(all);
  } finally {
    fs.closeSync(fd);
  }
}

export class FilesBufferOnDevice {
  private loader: SafeTensorsFileLoader;
  private group: ProcessGroup;
  private rank: number;
  private hosted: Map<string, HostedFile>;
  private index: Map<string, KeyInfo>;
  private closed = false;

  constructor(
    loader: SafeTensorsFileLoader,
    hosted: Map<string, HostedFile>,
    index: Map<string, KeyInfo>,
  ) {
    this.loader = loader;
    this.group = loader.group;
    this.rank = loader.rank;
    this.hosted = hosted;
    this.index = index;
  }

  keys(): string[] {
    return [...this.index.keys()];
  }

  metadata(key: string): TensorMeta {
    return this.info(key).meta;
  }

  /** Every rank receives a tensor bitwise equal to the owner's. */
  async get_tensor(key: string): Promise<BoundTensor> {
    this.checkOpen();
    const info = this.info(key);
    if (this.group.world_size === 1) {
      return this.materialize(this.locate(info));
    }
    const payload = this.rank === info.owner ? this.locate(info) : null;
    const entries = await this.group.checked(this.rank, ["get_tensor", key, info.owner], payload);
    const src = entries.get(info.owner) as TensorLocator | null;
    if (!src) throw new SpecMismatch(`owner rank ${info.owner} posted no tensor for ${key}`);
    const result = this.materialize(src);
    await this.group.checked(this.rank, ["get_tensor-done", key, info.owner], null);
    return result;
  }

  /** Every rank receives its contiguous partition along `dim`; a world of
   * one receives the full tensor. */
  async get_sharded(key: string, dim: number): Promise<BoundTensor> {
    this.checkOpen();
    const info = this.info(key);
    if (this.group.world_size === 1) {
      partition(info.meta, dim, 1); // same dim validation as multi-rank
      return this.materialize(this.locate(info));
    }
    const spec = partition(info.meta, dim, this.group.world_size);
    const payload = this.rank === info.owner ? this.locate(info) : null;
    const entries = await this.group.checked(
      this.rank, ["get_sharded", key, info.owner, dim], payload,
    );
    const src = entries.get(info.owner) as TensorLocator | null;
    if (!src) throw new SpecMismatch(`owner rank ${info.owner} posted no tensor for ${key}`);
    const [lo, hi] = shardBounds(spec, this.rank);
    const size = DTYPE_SIZES[info.meta.dtype];
    const whole = src.bytes.subarray(
      src.byteOffset, src.byteOffset + numel(info.meta.shape) * size,
    );
    const part = sliceAlongDim(whole, info.meta.shape, size, dim, lo, hi);
    const result = this.fromBytes(info.meta.dtype, spec.partShapes[this.rank], part);
    await this.group.checked(this.rank, ["get_sharded-done", key, info.owner, dim], null);
    return result;
  }

  close(): void {
    this.closed = true;
    this.hosted.clear();
  }

  private checkOpen(): void {
    if (this.closed) throw new UseAfterClose("FilesBufferOnDevice was closed");
  }

  private info(key: string): KeyInfo {
    const info = this.index.get(key);
    if (!info) throw new UnknownKey(`no tensor named ${JSON.stringify(key)} in the mapped files`);
    return info;
  }

  private locate(info: KeyInfo): TensorLocator {
    const hosted = this.hosted.get(info.file);
    if (!hosted) {
      throw new UnknownKey(
        `tensor ${info.meta.name} lives on rank ${info.owner}, not rank ${this.rank}`,
      );
    }
    return {
      bytes: hosted.bytes,
      byteOffset: hosted.header.bodyOffset + info.meta.dataOffsets[0],
      meta: info.meta,
    };
  }

  /** Wrap located bytes as an interchange tensor. Zero-copy when the byte
   * offset is element-aligned; otherwise the bytes are re-landed in a fresh
   * aligned buffer first (the scripting-side alignment correction). */
  private materialize(src: TensorLocator): BoundTensor {
    const size = DTYPE_SIZES[src.meta.dtype];
    const count = numel(src.meta.shape);
    const Ctor = DTYPE_ARRAYS[src.meta.dtype];
    const absolute = src.bytes.byteOffset + src.byteOffset;
    if (this.rank === this.index.get(src.meta.name)?.owner && absolute % size === 0) {
      const view = new Ctor(src.bytes.buffer as ArrayBuffer, absolute, count);
      return new BoundTensor(this.loader.device, src.meta.dtype, [...src.meta.shape], view);
    }
    return this.fromBytes(
      src.meta.dtype,
      [...src.meta.shape],
      src.bytes.subarray(src.byteOffset, src.byteOffset + count * size),
    );
  }

  private fromBytes(dtype: DTypeTag, shape: number[], raw: Uint8Array): BoundTensor {
    const copy = new Uint8Array(raw.byteLength);
    copy.set(raw);
    const Ctor = DTYPE_ARRAYS[dtype];
    const view = new Ctor(copy.buffer as ArrayBuffer, 0, numel(shape));
    return new BoundTensor(this.loader.device, dtype, shape, view);
  }
}
