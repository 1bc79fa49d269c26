"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Bad user-supplied configuration; the message names the offending key."""


class ContractError(RuntimeError):
    """An internal precondition or invariant was violated (programming error)."""
