class FairVICError(Exception):
    """Base class for errors raised by this package."""


class InvalidArgumentError(FairVICError, ValueError):
    pass


class ShapeError(FairVICError, ValueError):
    pass


class UndefinedMetricError(FairVICError, ArithmeticError):
    """A metric's denominator is empty or zero for the given bundle."""

    def __init__(self, metric: str, reason: str):
        super().__init__(f"{metric} undefined: {reason}")
        self.metric = metric
        self.reason = reason


class DataLoadError(FairVICError, ValueError):
    pass
