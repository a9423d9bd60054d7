"""Exception types shared across the package."""


class BevkdError(Exception):
    """Base class for package-specific failures."""


class ShapeError(BevkdError, ValueError):
    """Tensor or grid dimensions are inconsistent with an operation's contract."""


class DomainError(BevkdError, ValueError):
    """A value lies outside an operation's mathematical domain."""


class NumericError(BevkdError, ArithmeticError):
    """A computation produced a non-finite value."""


class PlacementError(BevkdError, RuntimeError):
    """Scene generation could not place the requested boxes without overlap."""


class SceneParseError(BevkdError, ValueError):
    """A scene file is malformed; the message names the failing byte offset or tag."""


class ConfigError(BevkdError, ValueError):
    """A run configuration is invalid or incomplete."""
