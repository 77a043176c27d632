"""Exception hierarchy shared by every module."""


class MaganError(Exception):
    """Base class for all errors raised by the toolkit."""


class DimensionError(MaganError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(MaganError, ValueError):
    """A value lies outside the domain an operation accepts."""


class ContractError(MaganError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(MaganError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(MaganError, ValueError):
    """A file does not follow its expected layout."""


class ParseError(FormatError):
    """A file cell could not be parsed."""


class UndefinedCorrelationError(MaganError, ValueError):
    """Pearson correlation requested for a constant vector."""


class TrainingDivergence(MaganError, RuntimeError):
    """A loss became non-finite during training."""

    def __init__(self, component: str, iteration: int, value: float):
        self.component = component
        self.iteration = iteration
        self.value = value
        super().__init__(f"non-finite {component}={value!r} at iteration {iteration}")
