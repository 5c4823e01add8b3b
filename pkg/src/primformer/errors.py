"""Exception types shared across the package."""


class PrimformerError(Exception):
    """Base class for all domain errors raised by this package."""


class EmptyFrame(PrimformerError):
    pass


class DegenerateGeometry(PrimformerError):
    pass


class InvalidConfig(PrimformerError):
    pass


class MissingNormals(PrimformerError):
    pass


class LengthMismatch(PrimformerError):
    pass


class NonFiniteInput(PrimformerError):
    pass


class EmptyGroup(PrimformerError):
    pass


class ConfigMismatch(PrimformerError):
    pass


class AllMasked(PrimformerError):
    pass


class DivergedLoss(PrimformerError):
    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"loss diverged (non-finite) at epoch {epoch}")


class InvalidSpec(PrimformerError):
    pass


class MalformedManifest(PrimformerError):
    pass


class FrameCountMismatch(PrimformerError):
    pass


class ParseError(PrimformerError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")
