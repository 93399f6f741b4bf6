"""Exception hierarchy shared across the package."""


class ShellGraspError(Exception):
    """Base class for all errors raised by shellgrasp."""


class DegenerateGradient(ShellGraspError, ArithmeticError):
    """The quadric gradient vanishes (numerically) at the query point."""


class InsufficientPoints(ShellGraspError, ValueError):
    pass


class DegenerateFit(ShellGraspError, ArithmeticError):
    """The smallest generalized eigenvalue is not isolated."""


class ZeroGradientConstraint(ShellGraspError, ArithmeticError):
    pass


class ProjectionFailure(ShellGraspError, ArithmeticError):
    """Too many curvature samples failed to converge onto the quadric."""


class EmptyCloud(ShellGraspError, ValueError):
    pass


class NotOrganized(ShellGraspError, ValueError):
    """Raised when an operation needs the range-image layout and there is none."""


class CollinearPoints(ShellGraspError, ArithmeticError):
    pass


class ImaginaryRadius(ShellGraspError, ArithmeticError):
    pass


class DegenerateCovariance(ShellGraspError, ArithmeticError):
    pass


class TooFewValidNormals(ShellGraspError, ValueError):
    pass


class NoVisibleGeometry(ShellGraspError, ValueError):
    pass


class InputFormatError(ShellGraspError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(ShellGraspError, ValueError):
    """Invalid configuration value or file."""
