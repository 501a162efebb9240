"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates an operation's preconditions."""


class ConfigError(ValueError):
    """A run or model configuration is inconsistent."""


class InvalidStateError(RuntimeError):
    """An operation was applied to sampler state it is not valid for."""


class StateCorruptionError(InvalidStateError):
    """Internal bookkeeping (caches, frozen rows) is inconsistent."""


class NoWorkError(InvalidStateError):
    """A computation was requested over an empty row set."""


class EstimateUndefinedError(ValueError):
    """A tail statistic was requested on a trajectory with no usable tail."""


class InternalConsistencyError(RuntimeError):
    """A quantity violated a bound it must satisfy up to round-off."""
