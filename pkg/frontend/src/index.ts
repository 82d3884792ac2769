export {
  BoundTensor,
  FilesBufferOnDevice,
  ProcessGroup,
  SafeTensorsFileLoader,
  SingleGroup,
  partition,
} from "./loader.js";
export type { FileMapping, ShardSpec } from "./loader.js";
export {
  parseHeader,
  validateHeader,
  writeFile,
  DEFAULT_HEADER_CAP,
} from "./format.js";
export type { FileHeader, TensorInput, TensorMeta } from "./format.js";
export {
  DTYPE_ARRAYS,
  DTYPE_SIZES,
  DTYPE_TAGS,
  bf16ToNumber,
  f16ToNumber,
  numel,
} from "./dtype.js";
export type { DTypeTag, InterchangeArray } from "./dtype.js";
export * from "./errors.js";
