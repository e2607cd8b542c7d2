"""Exception hierarchy shared by every module."""


class EnvShiftError(Exception):
    """Base class for all package errors."""


class ConfigError(EnvShiftError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ShapeError(EnvShiftError, ValueError):
    pass


class NumericalError(EnvShiftError, ArithmeticError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class EmptySelection(EnvShiftError, ValueError):
    pass


class UnknownEnv(EnvShiftError, ValueError):
    pass


class MissingClass(EnvShiftError, ValueError):
    pass


class SingleEnv(EnvShiftError, ValueError):
    pass


class PairingError(EnvShiftError, ValueError):
    pass


class ZeroVector(EnvShiftError, ValueError):
    pass


class InsufficientData(EnvShiftError, ValueError):
    def __init__(self, message, minimum=None):
        super().__init__(message)
        self.minimum = minimum


class OneClassOnly(EnvShiftError, ValueError):
    pass


class MissingDetector(EnvShiftError, ValueError):
    pass
