"""Exception types shared across the package."""


class DomainError(ValueError):
    """A point lies outside the support of a target."""


class ReducibleChainError(ValueError):
    """The transition matrix is not irreducible."""


class NonReversibleError(ValueError):
    """Detailed balance fails beyond tolerance."""


class SizeLimitError(ValueError):
    """A dense construction would exceed the supported state count."""


class QuadratureError(ArithmeticError):
    """Grid discretization left more off-diagonal mass than a row can hold."""


class DegenerateSeriesError(ValueError):
    """A series has zero sample variance."""


class BlowupError(ArithmeticError):
    """An ODE solve left the finite range."""


class ConfigError(ValueError):
    """Experiment configuration failed validation.

    ``problems`` maps field names to messages.
    """

    def __init__(self, problems: dict[str, str]):
        self.problems = dict(problems)
        lines = [f"{k}: {v}" for k, v in sorted(self.problems.items())]
        super().__init__("invalid config:\n  " + "\n  ".join(lines))


class MissingOutputError(FileNotFoundError):
    """A manifest is empty or lists files that do not exist."""
