"""Exception types.  CLI exit codes are attached as class attributes."""


class CivdgError(Exception):
    exit_code = 1


class ConfigError(CivdgError, ValueError):
    exit_code = 2


class ValidationError(CivdgError, ValueError):
    exit_code = 2


class DimensionError(ValidationError):
    pass


class DataError(CivdgError):
    exit_code = 3


class InfeasibleError(DataError):
    """A subsampling target cannot be met; ``cell`` names the (d, z) cell."""

    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


class StateError(CivdgError, RuntimeError):
    pass


class ColdStratumError(StateError):
    def __init__(self, strata):
        super().__init__(f"cold stratum (never seen in training): {sorted(strata)}")
        self.strata = sorted(strata)


class NumericalAbort(CivdgError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class ContractViolation(CivdgError):
    exit_code = 5
