/** Parse and write the safetensors wire format.
 *
 * Bytes 0..8: little-endian u64 header length N; bytes 8..8+N: UTF-8 JSON
 * layout; the rest is the body with raw little-endian tensor payloads.
 */

import {
  HeaderTooLarge,
  LengthMismatch,
  MalformedJson,
  NegativeShape,
  OffsetOutOfBounds,
  OverlappingTensors,
  SizeMismatch,
  TruncatedHeader,
} from "./errors.js";
import { DTypeTag, DTYPE_SIZES, checkDType, numel } from "./dtype.js";

export const DEFAULT_HEADER_CAP = 100 * 1024 * 1024;

export interface TensorMeta {
  name: string;
  dtype: DTypeTag;
  shape: number[];
  dataOffsets: [number, number];
}

export interface FileHeader {
  headerLen: number;
  bodyOffset: number;
  tensors: Map<string, TensorMeta>;
  metadata: Record<string, string> | null;
}

export function parseHeader(bytes: Uint8Array, headerCap = DEFAULT_HEADER_CAP): FileHeader {
  if (bytes.byteLength < 8) {
    throw new TruncatedHeader(`need 8 prefix bytes, got ${bytes.byteLength}`);
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  const headerLen64 = view.getBigUint64(0, true);
  if (headerLen64 > BigInt(headerCap)) {
    throw new HeaderTooLarge(`declared header length ${headerLen64} exceeds cap ${headerCap}`);
  }
  const headerLen = Number(headerLen64);
  if (bytes.byteLength < 8 + headerLen) {
    throw new TruncatedHeader(
      `declared header length ${headerLen} but only ${bytes.byteLength - 8} bytes follow`,
    );
  }
  let layout: unknown;
  try {
    layout = JSON.parse(new TextDecoder("utf-8", { fatal: true }).decode(
      bytes.subarray(8, 8 + headerLen),
    ));
  } catch (e) {
    throw new MalformedJson(`header JSON does not parse: ${e}`);
  }
  if (typeof layout !== "object" || layout === null || Array.isArray(layout)) {
    throw new MalformedJson("layout must be a JSON object");
  }

  const tensors = new Map<string, TensorMeta>();
  let metadata: Record<string, string> | null = null;
  for (const [name, entry] of Object.entries(layout as Record<string, unknown>)) {
    if (name === "__metadata__") {
      if (
        typeof entry !== "object" || entry === null || Array.isArray(entry) ||
        Object.values(entry).some((v) => typeof v !== "string")
      ) {
        throw new MalformedJson("__metadata__ must map strings to strings");
      }
      metadata = { ...(entry as Record<string, string>) };
      continue;
    }
    tensors.set(name, parseEntry(name, entry));
  }
  return { headerLen, bodyOffset: 8 + headerLen, tensors, metadata };
}

function parseEntry(name: string, entry: unknown): TensorMeta {
  if (typeof entry !== "object" || entry === null || Array.isArray(entry)) {
    throw new MalformedJson(`tensor ${name}: layout entry must be an object`);
  }
  const e = entry as Record<string, unknown>;
  if (!("dtype" in e) || !("shape" in e) || !("data_offsets" in e)) {
    throw new MalformedJson(`tensor ${name}: missing dtype/shape/data_offsets`);
  }
  if (typeof e.dtype !== "string") throw new MalformedJson(`tensor ${name}: dtype must be a string`);
  const dtype = checkDType(e.dtype);
  const shape = e.shape;
  if (!Array.isArray(shape) || shape.some((d) => !Number.isInteger(d))) {
    throw new MalformedJson(`tensor ${name}: shape must be a list of integers`);
  }
  if (shape.some((d: number) => d < 0)) {
    throw new NegativeShape(`tensor ${name}: negative dimension in ${JSON.stringify(shape)}`);
  }
  const offsets = e.data_offsets;
  if (
    !Array.isArray(offsets) || offsets.length !== 2 ||
    offsets.some((o) => !Number.isInteger(o) || o < 0)
  ) {
    throw new MalformedJson(`tensor ${name}: data_offsets must be two non-negative integers`);
  }
  return { name, dtype, shape: [...shape], dataOffsets: [offsets[0], offsets[1]] };
}

export function validateHeader(header: FileHeader, fileSize: number): void {
  const bodyLen = fileSize - header.bodyOffset;
  if (bodyLen < 0) {
    throw new OffsetOutOfBounds(`header ends at ${header.bodyOffset}, file is ${fileSize}`);
  }
  const occupied: Array<[number, number, string]> = [];
  for (const meta of header.tensors.values()) {
    const [begin, end] = meta.dataOffsets;
    if (end < begin || end > bodyLen) {
      throw new OffsetOutOfBounds(`tensor ${meta.name}: range [${begin}, ${end}) outside body`);
    }
    const expect = numel(meta.shape) * DTYPE_SIZES[meta.dtype];
    if (end - begin !== expect) {
      throw new SizeMismatch(
        `tensor ${meta.name}: range holds ${end - begin} bytes, needs ${expect}`,
      );
    }
    if (begin !== end) occupied.push([begin, end, meta.name]);
  }
  occupied.sort((a, b) => a[0] - b[0]);
  for (let i = 1; i < occupied.length; i++) {
    if (occupied[i][0] < occupied[i - 1][1]) {
      throw new OverlappingTensors(
        `tensors ${occupied[i - 1][2]} and ${occupied[i][2]} overlap`,
      );
    }
  }
}

export interface TensorInput {
  dtype: DTypeTag;
  shape: number[];
  data: Uint8Array;
}

/** Serialize tensors packed contiguously in insertion order (fixture writer).
 * `padHeaderTo` pads the JSON with trailing spaces to exactly that length. */
export function writeFile(
  tensors: Map<string, TensorInput> | Record<string, TensorInput>,
  metadata: Record<string, string> | null = null,
  padHeaderTo: number | null = null,
): Uint8Array {
  const entries = tensors instanceof Map ? [...tensors.entries()] : Object.entries(tensors);
  const layout: Record<string, unknown> = {};
  if (metadata !== null) layout["__metadata__"] = metadata;
  let cursor = 0;
  let bodyLen = 0;
  for (const [name, t] of entries) {
    const expect = numel(t.shape) * DTYPE_SIZES[t.dtype];
    if (t.data.byteLength !== expect) {
      throw new LengthMismatch(
        `tensor ${name}: got ${t.data.byteLength} bytes, shape needs ${expect}`,
      );
    }
    layout[name] = { dtype: t.dtype, shape: t.shape, data_offsets: [cursor, cursor + expect] };
    cursor += expect;
    bodyLen += expect;
  }
  let doc = new TextEncoder().encode(JSON.stringify(layout));
  if (padHeaderTo !== null) {
    if (padHeaderTo < doc.byteLength) {
      throw new RangeError(`padHeaderTo=${padHeaderTo} smaller than layout JSON (${doc.byteLength})`);
    }
    const padded = new Uint8Array(padHeaderTo);
    padded.fill(0x20);
    padded.set(doc);
    doc = padded;
  }
  const out = new Uint8Array(8 + doc.byteLength + bodyLen);
  new DataView(out.buffer).setBigUint64(0, BigInt(doc.byteLength), true);
  out.set(doc, 8);
  let at = 8 + doc.byteLength;
  for (const [, t] of entries) {
    out.set(t.data, at);
    at += t.data.byteLength;
  }
  return out;
}
