"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DTDAError(Exception):
    exit_code = 1


class ConfigError(DTDAError, ValueError):
    exit_code = 2


class InputError(DTDAError, ValueError):
    exit_code = 3


class FormatError(InputError):
    exit_code = 3


class EvaluationError(InputError):
    """Metric inputs that cannot be evaluated (e.g. a single class)."""


class DivergenceError(DTDAError, RuntimeError):
    exit_code = 4

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class LeakageError(DTDAError, RuntimeError):
    """A target-domain sample reached a training step."""

    exit_code = 5
