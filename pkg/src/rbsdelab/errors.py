"""Exception hierarchy shared by all rbsdelab modules."""


class Error(Exception):
    """Base class for all rbsdelab errors."""


class TreeStructureError(Error):
    """Event-tree construction or validation failed."""


class RuleOrderingError(Error):
    """A pair of stopping rules violates the required pathwise ordering."""


class NonMonotoneGenerator(Error):
    """A generator failed its monotonicity contract.

    Raised either during the construction spot check (sampled y-grid) or
    when the implicit-step root finder observes a sign pattern that a
    nonincreasing residual cannot produce.
    """


class RootNotBracketed(Error):
    """Bracket expansion exhausted without enclosing a sign change."""


class StepSizeError(Error):
    """mu * dt >= 1, so the implicit step may lose unique solvability."""


class BarrierCrossing(Error):
    """Lower barrier exceeds upper barrier at some node."""


class TerminalViolation(Error):
    """Terminal data escapes the barrier interval at the horizon."""


class OracleTooLarge(Error):
    """A brute-force enumeration would exceed the configured cap."""


class NonTransient(Error):
    """Stationary value iteration failed to contract within its cap."""


class SolverDivergence(Error):
    """An iterative solver's residual grew instead of shrinking."""


class NewtonStagnation(Error):
    """Damped Newton could not reduce the residual any further."""


class ConfigError(Error):
    """A scenario file failed to parse or validate."""
