"""Exception types. Each carries a stable ``code`` used as the CLI error prefix."""


class TTQError(Exception):
    code = "ERROR"


class CountMismatch(TTQError, ValueError):
    code = "COUNT_MISMATCH"


class OutOfRange(TTQError, IndexError):
    code = "OUT_OF_RANGE"


class RangeViolation(TTQError, ValueError):
    code = "RANGE"


class ShapeError(TTQError, ValueError):
    code = "SHAPE"


class ShapeMismatch(ShapeError):
    code = "SHAPE_MISMATCH"


class OverflowRisk(TTQError, ValueError):
    code = "OVERFLOW_RISK"


class BadChain(TTQError, ValueError):
    code = "BAD_CHAIN"


class ModeMismatch(TTQError, ValueError):
    code = "MODE_MISMATCH"


class BadConfig(TTQError, ValueError):
    code = "BAD_CONFIG"


class NonFinite(TTQError, FloatingPointError):
    code = "NONFINITE"


class TooShort(TTQError, ValueError):
    code = "TOO_SHORT"


class Truncated(TTQError, ValueError):
    code = "TRUNCATED"


class TrailingBytes(TTQError, ValueError):
    code = "TRAILING_BYTES"


class BadMagic(TTQError, ValueError):
    code = "BAD_MAGIC"


class BadChecksum(TTQError, ValueError):
    code = "BAD_CHECKSUM"


class VersionError(TTQError, ValueError):
    code = "VERSION"
