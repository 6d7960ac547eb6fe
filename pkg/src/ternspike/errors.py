"""Exception types shared across the package."""


class TernSpikeError(Exception):
    """Base class for all library errors."""


class DimensionError(TernSpikeError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(TernSpikeError, ValueError):
    """A network, run, or layer configuration is invalid."""


class ContractError(TernSpikeError, RuntimeError):
    """A precondition of an operation was violated."""


class FormatError(TernSpikeError, ValueError):
    """A binary or text file does not follow its declared format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConversionError(TernSpikeError, ValueError):
    """A checkpoint cannot be re-parameterized."""


class VerificationError(TernSpikeError, AssertionError):
    """A converted network is not output-equivalent to its source."""


class TrainingDiverged(TernSpikeError, FloatingPointError):
    """The loss or gradients became non-finite during training."""

    def __init__(self, epoch, layer, step=None):
        where = f"epoch {epoch}" + (f", step {step}" if step is not None else "")
        super().__init__(f"training diverged (non-finite loss or gradient) at {where}; first non-finite layer: {layer}")
        self.epoch = epoch
        self.layer = layer
        self.step = step
