"""Exception types raised across the package."""


class SwimRLError(Exception):
    pass


class OverflowAbort(SwimRLError):
    """Separation left the admissible region or became non-finite."""

    def __init__(self, state, message="separation exceeded max_sep or became non-finite"):
        super().__init__(message)
        self.state = state


class DegenerateWindow(SwimRLError):
    pass


class InsufficientSamples(SwimRLError):
    pass


class DegenerateFit(SwimRLError):
    """Cramer fit impossible (zero spread); the mean is still carried."""

    def __init__(self, lambda_bar, message="samples have zero spread"):
        super().__init__(f"{message} (lambda_bar={lambda_bar!r})")
        self.lambda_bar = lambda_bar


class UnboundedDistribution(SwimRLError):
    pass


class NoStationaryState(SwimRLError):
    pass


class UnstableRegime(SwimRLError):
    pass


class ShapeMismatch(SwimRLError, ValueError):
    pass


class NonFiniteGradient(SwimRLError):
    pass


class ConfigError(SwimRLError):
    """Invalid configuration; ``location`` is ``path:line:key`` when known."""

    def __init__(self, message, location=None):
        super().__init__(f"{location}: {message}" if location else message)
        self.location = location
