"""Exception hierarchy shared by all phonotok modules."""


class PhonotokError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(PhonotokError, ValueError):
    pass


class ContractError(PhonotokError, ValueError):
    """A documented precondition was violated (e.g. non-scalar loss)."""


class ConfigError(PhonotokError, ValueError):
    pass


class InitializationError(PhonotokError, ValueError):
    pass


class DataError(PhonotokError, ValueError):
    pass


class InfeasibleTargetError(PhonotokError, ValueError):
    """CTC target cannot be aligned to the available frames."""


class TrainingAbort(PhonotokError, RuntimeError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class CheckpointError(PhonotokError, IOError):
    pass


class CompatibilityError(PhonotokError, ValueError):
    """Inputs were produced under a different config hash."""


class DegenerateProbeError(PhonotokError, ValueError):
    pass


class UndefinedMetricError(PhonotokError, ValueError):
    pass
