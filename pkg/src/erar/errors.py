"""Exception hierarchy shared by the solvers, trainer and CLI."""


class ErarError(Exception):
    """Base class for all errors raised by this package."""


class ArgumentError(ErarError, ValueError):
    """Invalid sizes, shapes or parameter ranges."""


class DivergenceError(ErarError):
    """A policy puts mass on an action the prior does not support (infinite KL)."""


class StructuralError(ErarError):
    """The induced Markov chain does not have a unique stationary distribution."""


class ConvergenceError(ErarError):
    """An iterative solver hit its iteration cap.

    The partial :class:`~erar.exact.SolveReport` is attached as ``report``.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NumericError(ErarError, FloatingPointError):
    """A non-finite value showed up in a loss, gradient or target."""


class VerificationError(ErarError):
    """A theorem check failed on a generated instance."""

    def __init__(self, message, seed=None, report=None):
        super().__init__(message)
        self.seed = seed
        self.report = report
