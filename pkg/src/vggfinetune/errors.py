"""Exception hierarchy shared by every module in the package."""


class VGGError(Exception):
    """Base class for all errors raised by vggfinetune."""


class DimensionError(VGGError, ValueError):
    """Tensor shapes disagree along a named axis."""


class ConfigurationError(VGGError, ValueError):
    """Invalid hyperparameter, kernel setting or config file entry."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InputError(VGGError, ValueError):
    """Malformed user data: labels, splits, datasets."""


class NoClassesError(InputError):
    pass


class EmptyClassError(InputError):
    pass


class UnreadableFileError(InputError):
    pass


class ClassTooSmallError(InputError):
    pass


class StateError(VGGError, RuntimeError):
    """Operation called in the wrong lifecycle state."""


class DivergenceError(VGGError, RuntimeError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"loss became {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class DecodeError(VGGError, ValueError):
    pass


class UnknownFormatError(DecodeError):
    pass


class TruncatedImageError(DecodeError):
    pass


class WeightError(VGGError, ValueError):
    """Weight store is inconsistent with its graph."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class MissingWeightError(WeightError):
    pass


class WeightShapeError(WeightError):
    pass


class WeightFormatError(WeightError):
    """Bad magic bytes or unsupported version."""


class ArchitectureMismatchError(WeightError):
    pass


class TruncatedWeightFileError(WeightError):
    pass
