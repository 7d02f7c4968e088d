class FairShiftError(Exception):
    """Base class for library errors."""


class ConfigError(FairShiftError, ValueError):
    """Invalid configuration value.  ``key`` names the offending config path when known."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ContractError(FairShiftError, ValueError):
    """A caller violated an operation's precondition."""


class MetricError(FairShiftError, ValueError):
    """A metric is undefined on the given data (e.g. an empty group cell)."""


class BudgetError(FairShiftError, RuntimeError):
    """An exhaustive enumeration would exceed its size budget."""
