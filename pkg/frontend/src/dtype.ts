/** Dtype tags as the safetensors format spells them, with byte sizes and
 * the TypedArray each maps to for the dense-array interchange surface.
 * F16/BF16 have no native JS array type and travel as raw uint16 bits. */

import { UnknownDType } from "./errors.js";

export const DTYPE_TAGS = [
  "BOOL", "U8", "I8", "I16", "U16", "I32", "U32", "I64", "U64",
  "F16", "BF16", "F32", "F64",
] as const;

export type DTypeTag = (typeof DTYPE_TAGS)[number];

export const DTYPE_SIZES: Record<DTypeTag, number> = {
  BOOL: 1, U8: 1, I8: 1,
  I16: 2, U16: 2,
  I32: 4, U32: 4,
  I64: 8, U64: 8,
  F16: 2, BF16: 2,
  F32: 4, F64: 8,
};

export type InterchangeArray =
  | Uint8Array
  | Int8Array
  | Uint16Array
  | Int16Array
  | Uint32Array
  | Int32Array
  | BigUint64Array
  | BigInt64Array
  | Float32Array
  | Float64Array;

type ArrayCtor = {
  new (buffer: ArrayBuffer, byteOffset: number, length: number): InterchangeArray;
  BYTES_PER_ELEMENT: number;
};

export const DTYPE_ARRAYS: Record<DTypeTag, ArrayCtor> = {
  BOOL: Uint8Array,
  U8: Uint8Array,
  I8: Int8Array,
  I16: Int16Array,
  U16: Uint16Array,
  I32: Int32Array,
  U32: Uint32Array,
  I64: BigInt64Array,
  U64: BigUint64Array,
  F16: Uint16Array,
  BF16: Uint16Array,
  F32: Float32Array,
  F64: Float64Array,
};

export function checkDType(tag: string): DTypeTag {
  if (!(DTYPE_TAGS as readonly string[]).includes(tag)) {
    throw new UnknownDType(`unknown dtype tag ${JSON.stringify(tag)}`);
  }
  return tag as DTypeTag;
}

export function numel(shape: readonly number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

/** Decode one bf16 bit pattern: the high half of an f32. */
export function bf16ToNumber(bits: number): number {
  const buf = new ArrayBuffer(4);
  new Uint32Array(buf)[0] = (bits & 0xffff) << 16;
  return new Float32Array(buf)[0];
}

/** Decode one IEEE binary16 bit pattern. */
export function f16ToNumber(bits: number): number {
  const sign = bits >> 15 ? -1 : 1;
  const exp = (bits >> 10) & 0x1f;
  const mant = bits & 0x3ff;
  if (exp === 0) return sign * mant * 2 ** -24;
  if (exp === 31) return mant ? NaN : sign * Infinity;
  return sign * (1 + mant / 1024) * 2 ** (exp - 15);
}
