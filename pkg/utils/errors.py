class WignerPNRError(Exception):
    """Base class for every error raised by the package"""

    exit_code = 1


class ConfigError(WignerPNRError):
    exit_code = 3


class PacketFormatError(WignerPNRError):
    exit_code = 4


class CalibrationError(WignerPNRError):
    """Pulse-height histogram could not be split into photon-number classes"""

    exit_code = 5

    def __init__(self, message: str, peaks=(), valley_ratios=()):
        super().__init__(message)
        self.peaks = tuple(peaks)
        self.valley_ratios = tuple(valley_ratios)


class FitConvergenceError(WignerPNRError):
    exit_code = 6

    def __init__(self, message: str, final_cost: float, trace=()):
        super().__init__(message)
        self.final_cost = final_cost
        self.trace = list(trace)


class DomainError(WignerPNRError, ValueError):
    """Argument outside the mathematical domain of an operation"""


class TruncationError(WignerPNRError):
    def __init__(self, message: str, tail_mass: float, suggested_cutoff: int):
        super().__init__(message)
        self.tail_mass = tail_mass
        self.suggested_cutoff = suggested_cutoff


class IntegrationError(WignerPNRError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class TruncationWarning(UserWarning):
    pass


class SaturationWarning(UserWarning):
    pass
