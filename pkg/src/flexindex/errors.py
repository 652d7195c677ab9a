class FlexIndexError(Exception):
    """Base class for all library errors."""


class InputError(FlexIndexError, ValueError):
    """Rejected user input: set-points, scenarios, settings or region choices."""


class CaseFileError(InputError):
    def __init__(self, message: str, field_path: str = ''):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}" if field_path else message)


class ConfigError(InputError):
    pass


class BackendUnavailableError(FlexIndexError):
    pass


class SolverFailure(FlexIndexError):
    pass


class InfeasibleBaseCase(FlexIndexError):
    pass


class OracleCapExceeded(FlexIndexError):
    pass
