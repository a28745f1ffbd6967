"""Exception hierarchy shared by every featsketch module."""


class FeatsketchError(Exception):
    """Base class for all errors raised by featsketch."""


class DimensionError(FeatsketchError, ValueError):
    pass


class ScheduleError(FeatsketchError, ValueError):
    pass


class ConfigError(FeatsketchError, ValueError):
    pass


class ValidationError(ConfigError):
    """Config value violates an invariant. ``fields`` names the offenders."""

    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = tuple(fields)


class AdapterError(FeatsketchError, RuntimeError):
    pass


class ParsingError(AdapterError):
    pass


class DegeneracyError(FeatsketchError, ArithmeticError):
    pass


class NumericError(FeatsketchError, ArithmeticError):
    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class IntegrityError(FeatsketchError, IOError):
    pass


class DataError(FeatsketchError, ValueError):
    def __init__(self, message, problems=()):
        super().__init__(message)
        self.problems = list(problems)


class TrainingAborted(AdapterError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
