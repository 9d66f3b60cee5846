"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions incompatible with the requested operation."""


class FormatError(ValueError):
    """Malformed file content; message carries the byte offset when known."""


class ProtocolError(RuntimeError):
    """Pipeline invoked out of contract (wrong group state, missing inputs)."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required (e.g. training loss)."""


class UndefinedMetricError(ValueError):
    """Metric requested on a score set that cannot define it."""


class SynthesisError(RuntimeError):
    """Pseudo-anomaly generation failed after bounded retries."""
