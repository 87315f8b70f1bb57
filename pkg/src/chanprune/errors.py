"""Exception hierarchy shared by all chanprune modules."""


class ChanPruneError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(ChanPruneError, ValueError):
    pass


class ShapeError(ChanPruneError, ValueError):
    pass


class StructureError(ChanPruneError, ValueError):
    pass


class PlanMismatch(ChanPruneError, ValueError):
    pass


class InvalidPlan(ChanPruneError, ValueError):
    pass


class FormatError(ChanPruneError, ValueError):
    """Malformed model file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DatasetError(ChanPruneError):
    pass


class ConfigError(ChanPruneError, ValueError):
    pass


class NumericalError(ChanPruneError, ArithmeticError):
    pass
