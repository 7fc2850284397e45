"""Exception types shared across the package."""


class NumericalFailure(RuntimeError):
    """A numerical routine could not produce a trustworthy result."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics if diagnostics is not None else {}


class AmpDivergence(NumericalFailure):
    """AMP produced non-finite values or a runaway threshold.

    ``trace`` holds the per-iteration records gathered before the failure.
    """

    def __init__(self, message, trace):
        super().__init__(message, {"trace": trace})
        self.trace = trace
