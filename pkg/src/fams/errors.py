"""Exception hierarchy shared by the library and the command-line runner."""


class FamsError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(FamsError, ValueError):
    """Array dimensions or network topologies do not line up."""


class DataError(FamsError, ValueError):
    """Malformed, missing or degenerate input data."""


class ConfigError(FamsError, ValueError):
    """Invalid experiment or trainer configuration."""


class TrainingError(FamsError, RuntimeError):
    """Optimisation produced a non-finite quantity."""
