/** Typed errors; the class name is the stable error identifier. */

export class AggloadError extends Error {
  constructor(message: string) {
    super(message);
    this.name = new.target.name;
  }
}

export class TruncatedHeader extends AggloadError {}
export class HeaderTooLarge extends AggloadError {}
export class MalformedJson extends AggloadError {}
export class UnknownDType extends AggloadError {}
export class NegativeShape extends AggloadError {}
export class SizeMismatch extends AggloadError {}
export class OffsetOutOfBounds extends AggloadError {}
export class OverlappingTensors extends AggloadError {}
export class LengthMismatch extends AggloadError {}
export class DuplicateKey extends AggloadError {}
export class UnknownKey extends AggloadError {}
export class UseAfterClose extends AggloadError {}
export class RendezvousTimeout extends AggloadError {}
export class BadDim extends AggloadError {}
export class DimTooSmall extends AggloadError {}
export class SpecMismatch extends AggloadError {}
