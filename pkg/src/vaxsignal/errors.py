"""Exception hierarchy shared across the package.

Each subcommand maps these onto process exit codes: config errors 2,
convergence failures 3, data errors 4.
"""


class VaxsignalError(Exception):
    """Base class for package errors."""


class ConfigError(VaxsignalError):
    """Invalid configuration value, unknown key, or inconsistent options."""


class DataError(VaxsignalError):
    """Malformed or inconsistent input data."""


class ConvergenceError(VaxsignalError):
    """Convergence gate failed (R_c above threshold under strict mode)."""


class ChainDivergedError(VaxsignalError):
    """A chain produced a non-finite deviance at a retained iteration.

    Carries a diagnostic dump with the chain index, iteration, offending
    adverse events, and the draws retained before the abort.
    """

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}
