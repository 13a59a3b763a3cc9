"""Exception hierarchy shared by every module."""


class HSCMTError(Exception):
    """Base class for all library errors."""


class ShapeError(HSCMTError, ValueError):
    pass


class ConfigError(HSCMTError, ValueError):
    pass


class ContractError(HSCMTError, ValueError):
    pass


class NumericalError(HSCMTError, FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class DatasetError(HSCMTError):
    pass


class CheckpointError(HSCMTError):
    pass


class CurveError(HSCMTError, ValueError):
    pass
