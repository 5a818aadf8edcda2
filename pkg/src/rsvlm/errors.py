"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
ShapeError/DomainError -> 3, FormatError (and OSError) -> 4.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class DomainError(ValueError):
    """Numerically invalid input or result (zero norms, NaN/Inf, divergence)."""


class FormatError(ValueError):
    """A serialized artifact (RSDB / RSDE / RSCK / JSONL) is malformed."""


class ConfigError(ValueError):
    """Invalid run configuration. Carries every violation found, not just the first."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
