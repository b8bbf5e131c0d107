"""Exception types shared across the toolkit."""


class RReLUError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(RReLUError, ValueError):
    """Operand shapes do not agree."""


class ContractError(RReLUError, ValueError):
    """A precondition of an operation was violated."""


class InputError(RReLUError, ValueError):
    """Bad user-provided data (labels out of range, empty sets, ...)."""


class DegenerateBatchError(RReLUError, ValueError):
    """Batch statistics cannot be computed from a zero-extent batch."""


class StructuralError(RReLUError, ValueError):
    """A pruning mask would remove a layer that cannot be removed."""


class UnsupportedStructureError(RReLUError, ValueError):
    """A transformation was asked for on a layer layout it cannot handle."""


class CheckpointError(RReLUError):
    """Base class for checkpoint (de)serialization failures."""


class CorruptManifestError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class CheckpointIncompatibleError(CheckpointError, ValueError):
    pass


class ParseError(RReLUError, ValueError):
    """Dataset file does not follow the expected binary layout."""


class DivergenceError(RReLUError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")
