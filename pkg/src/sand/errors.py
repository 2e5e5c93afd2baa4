"""Exception hierarchy shared by every module."""


class SandError(Exception):
    """Base class for all errors raised by the package."""


class ContractError(SandError, ValueError):
    """A caller violated a documented precondition (shapes, ranges, ...)."""


class ParseError(SandError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(SandError, ValueError):
    def __init__(self, user_id, violations):
        self.user_id = user_id
        self.violations = list(violations)
        super().__init__(f"sequence {user_id!r}: " + "; ".join(self.violations))


class DivergenceError(SandError, FloatingPointError):
    """Non-finite values appeared during integration or training."""


class SamplerStallError(SandError, RuntimeError):
    pass


class EmptyMetricError(SandError, ValueError):
    def __init__(self, kind):
        self.kind = kind
        super().__init__(f"no observations for metric {kind!r}")


class CheckpointError(SandError, ValueError):
    pass
