"""Exception types raised across the package."""


class GatsbiError(Exception):
    pass


class ConfigurationError(GatsbiError, ValueError):
    pass


class TrajectoryParseError(GatsbiError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrajectoryDataError(GatsbiError, ValueError):
    pass


class NeighborLookupError(GatsbiError, LookupError):
    pass


class InputError(GatsbiError, ValueError):
    """Predictor called with too little history or malformed arrays."""


class ShapeError(GatsbiError, ValueError):
    pass


class NumericalError(GatsbiError, ArithmeticError):
    pass


class LowSpeedError(GatsbiError):
    """Speed estimate below the threshold where heading is defined."""


class SingularityError(GatsbiError, ValueError):
    pass


class DegeneratePointError(GatsbiError, ValueError):
    pass


class UnwrapAmbiguityError(GatsbiError, ValueError):
    pass
