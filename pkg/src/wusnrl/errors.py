"""Exception types raised across the package."""


class WusnError(Exception):
    """Base class for all package errors."""


class InvalidInputError(WusnError, ValueError):
    pass


class InvalidModulationError(WusnError, ValueError):
    pass


class SchemaError(WusnError, ValueError):
    pass


class TimingError(WusnError, ValueError):
    """Timestamps are duplicated, decreasing or off the declared step."""

    def __init__(self, message: str, row: int):
        super().__init__(f"row {row}: {message}")
        self.row = row


class UnrecoverableDataError(WusnError, ValueError):
    pass


class InvalidConfigError(WusnError, ValueError):
    pass


class DegenerateFitError(WusnError, RuntimeError):
    pass


class ConvergenceError(WusnError, RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} sweeps)")
        self.residual = residual
        self.iterations = iterations


class ContractViolation(WusnError, ValueError):
    pass


class ConfigurationError(WusnError, ValueError):
    pass


class UndefinedRatioError(WusnError, ZeroDivisionError):
    pass
