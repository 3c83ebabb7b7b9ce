"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class PFAError(Exception):
    exit_code = 1


class ConfigError(PFAError, ValueError):
    exit_code = 2


class DataError(PFAError):
    exit_code = 3


class IngestError(DataError):
    pass


class NumericalError(PFAError, FloatingPointError):
    exit_code = 4
