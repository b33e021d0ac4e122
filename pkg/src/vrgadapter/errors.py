"""Exception hierarchy. ``exit_code`` is what the CLI returns for each class."""


class VRGError(Exception):
    exit_code = 2


class ConfigError(VRGError, ValueError):
    exit_code = 1


class FormatError(VRGError):
    exit_code = 2


class DataError(VRGError, ValueError):
    exit_code = 2


class DimensionError(VRGError, ValueError):
    exit_code = 2


class DegenerateInputError(VRGError, ValueError):
    exit_code = 2


class NumericalError(VRGError, ArithmeticError):
    exit_code = 3


class InvariantError(NumericalError):
    """A value violated a mathematical invariant, e.g. negative variance."""
