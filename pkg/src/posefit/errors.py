"""Exception hierarchy. CLI exit codes are keyed off these classes."""


class PosefitError(Exception):
    exit_code = 1
    kind = "error"


class ContractError(PosefitError, ValueError):
    """A caller violated an operation's preconditions."""

    exit_code = 3
    kind = "contract"


class ConfigError(PosefitError):
    exit_code = 2
    kind = "config"


class DataError(PosefitError):
    """Missing, corrupt or inconsistent input data."""

    exit_code = 3
    kind = "data"


class BehindCameraError(ContractError):
    pass
