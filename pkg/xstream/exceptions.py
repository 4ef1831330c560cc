"""Exceptions raised by XStream."""


class XStreamError(Exception):
    """Base class for every error raised on purpose by the library."""


class ShapeError(XStreamError, ValueError):
    """Tensor extents do not fit the operation."""


class NonFiniteError(XStreamError, FloatingPointError):
    """A forward primitive produced NaN or Inf."""


class MaskError(XStreamError, ValueError):
    """Malformed attention geometry."""


class StreamClosedError(XStreamError, RuntimeError):
    """The stream or session was already finalized."""


class AudioFormatError(XStreamError, ValueError):
    """Unsupported WAV content. The message names the offending field."""

    def __init__(self, field: str, detail: str):
        self.field = field
        super().__init__(f"unsupported {field}: {detail}")


class ManifestError(XStreamError, ValueError):
    """Malformed manifest line."""

    def __init__(self, line_no: int, detail: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {detail}")


class CheckpointError(XStreamError, ValueError):
    """Checkpoint container could not be read or applied."""


class ConfigError(XStreamError, ValueError):
    """Invalid run configuration. The message names the dotted key."""

    def __init__(self, key: str, detail: str):
        self.key = key
        super().__init__(f"{key}: {detail}")


class TrainingDivergedError(XStreamError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, detail: str, **diagnostics):
        self.diagnostics = diagnostics
        extra = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
        super().__init__(f"{detail} ({extra})" if extra else detail)
