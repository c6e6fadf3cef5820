"""Exception hierarchy shared by every qwrlab module."""


class QWRLabError(Exception):
    """Base class for all library errors."""


class RejectedInputError(QWRLabError, ValueError):
    """Input has the wrong shape or width for the receiving network."""


class InvalidParameterError(QWRLabError, ValueError):
    pass


class InvalidActionError(QWRLabError, ValueError):
    pass


class ProtocolError(QWRLabError, RuntimeError):
    """Operation called in a state that does not allow it (done episode, empty buffer...)."""


class DecodeError(QWRLabError, ValueError):
    pass


class ConfigError(QWRLabError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class TrainingDivergenceError(QWRLabError, FloatingPointError):
    """A loss, gradient or target became non-finite.

    ``step`` is the optimizer step (or training iteration, when raised by the
    outer loop) at which the problem was detected.
    """

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class TargetDivergenceError(TrainingDivergenceError):
    pass
