"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class EmptyBagError(ValueError):
    """A bag-level operation received zero instances."""


class AutodiffError(RuntimeError):
    """Misuse of the differentiation machinery (non-scalar loss, double backward, ...)."""


class ConfigError(ValueError):
    """Invalid configuration: bad key, bad value, or inconsistent dimensions."""


class BagFormatError(ValueError):
    """A bag or parameter file does not follow its binary format."""


class BadMagicError(BagFormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(BagFormatError):
    """File ends before the payload announced in its header."""


class SizeOverflowError(BagFormatError):
    """Header announces a payload too large to be a sane bag."""


class CalibrationError(ValueError):
    """Label prevalence could not be calibrated to the requested target."""

    def __init__(self, task: int, target: float, achieved: float):
        self.task = task
        self.target = target
        self.achieved = achieved
        super().__init__(
            f"task {task}: requested prevalence {target:.4f}, achieved {achieved:.4f}"
        )


class AUCUndefinedError(ValueError):
    """AUC is undefined because one class is absent."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, bag_id: str, value: float):
        self.epoch = epoch
        self.bag_id = bag_id
        super().__init__(
            f"non-finite loss {value!r} at epoch {epoch}, bag {bag_id!r}"
        )
