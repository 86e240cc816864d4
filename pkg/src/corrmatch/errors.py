"""Exception hierarchy shared by all corrmatch modules."""


class CorrmatchError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(CorrmatchError, ValueError):
    """Invalid density, graph, experiment or CLI configuration."""


class CouplingInfeasibleError(CorrmatchError):
    """A coupling leaves some user's residual distribution outside [0, 1]."""

    def __init__(self, user: int, detail: str = ""):
        self.user = user
        msg = f"coupling infeasible for user {user}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class MechanismError(CorrmatchError, ValueError):
    """Bad input to an anonymization or obfuscation mechanism."""


class DomainError(CorrmatchError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class UnsupportedTopologyError(CorrmatchError):
    """The joint decorrelating scheme only supports groups of size <= 2."""


class AttackFailed(CorrmatchError):
    """The adversary could not locate the target group."""


class BudgetExceeded(CorrmatchError):
    """An exact enumeration would exceed the configured budget."""


class NoThreshold(CorrmatchError):
    """A success curve never crosses the requested level."""
