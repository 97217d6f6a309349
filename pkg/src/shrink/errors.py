"""Exception hierarchy shared across the toolkit."""


class ShrinkError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(ShrinkError, ValueError):
    pass


class NonFiniteError(ShrinkError, ValueError):
    pass


class UndefinedSimilarityError(ShrinkError, ValueError):
    """Cosine similarity requested for a zero-norm vector."""


class InvalidQuantizedTensor(ShrinkError, ValueError):
    pass


class TokenError(ShrinkError, ValueError):
    """Token id out of range or sequence too long."""


class ProtectedBlockError(ShrinkError, ValueError):
    pass


class DegenerateModelError(ShrinkError, ValueError):
    pass


class CheckpointError(ShrinkError):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic, unsupported version or malformed directory."""


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class CalibrationError(ShrinkError, ValueError):
    pass


class PlanError(ShrinkError, ValueError):
    """Invalid pruning plan request (k too large, strategy/criterion mismatch)."""


class QuantizationError(ShrinkError, ValueError):
    pass


class AdapterError(ShrinkError, ValueError):
    pass


class DivergedError(ShrinkError, RuntimeError):
    def __init__(self, step: int, loss: float, detail: str = ""):
        msg = f"training diverged at step {step}: loss={loss!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.step = step
        self.loss = loss


class EvaluationError(ShrinkError, ValueError):
    pass


class ExclusiveModeError(ShrinkError, RuntimeError):
    """Latency measurement attempted while another measurement holds the machine."""


class ConfigError(ShrinkError, ValueError):
    pass


class StageError(ShrinkError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
