"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition or invariant."""


class ConfigError(ValidationError):
    """Raised for bad run configuration; collects every offending key at once."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class OptimizerError(RuntimeError):
    """Raised when an optimizer step cannot proceed (e.g. non-finite gradients)."""


class UsageError(ValidationError):
    """Raised for command-line usage mistakes (missing flags, bad combinations)."""
