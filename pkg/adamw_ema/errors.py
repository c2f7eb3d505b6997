# adamw_ema/errors.py


class AdamwEmaError(RuntimeError):
    pass


class ShapeError(AdamwEmaError):
    """Forward contract failure; the message names the offending node."""


class NonFiniteError(AdamwEmaError):
    def __init__(self, message: str, node=None, param=None, step=None):
        super().__init__(message)
        self.node = node
        self.param = param
        self.step = step


class ConfigError(AdamwEmaError, ValueError):
    """Invalid configuration or violated precondition (CLI exit code 2)."""


class TimescaleError(ConfigError):
    pass


class HypothesisError(ConfigError):
    pass
