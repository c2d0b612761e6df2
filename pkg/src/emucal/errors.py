"""Exception types shared across the package.

Plain ``ValueError`` is used for bad arguments; the classes here mark
failures that callers (in particular the CLI) need to tell apart.
"""


class ConfigError(ValueError):
    """A run configuration file is missing, malformed, or inconsistent."""


class SimulatorError(RuntimeError):
    """A simulator run failed (nonzero exit, timeout, or unstable state).

    ``captured`` holds any stdout/stderr collected from an external process.
    """

    def __init__(self, message, captured=""):
        super().__init__(message)
        self.captured = captured


class ProtocolError(SimulatorError):
    """An external simulator produced output violating the file protocol."""


class NumericalError(RuntimeError):
    """A numerical routine lost required structure (PSD-ness, finiteness)."""


class EstimationError(RuntimeError):
    """Auxiliary-parameter estimation did not converge.

    ``best`` carries the best parameter values found before giving up.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
