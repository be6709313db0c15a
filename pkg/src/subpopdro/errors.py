"""Exception hierarchy; each class maps onto a CLI exit code."""


class SubpopError(Exception):
    exit_code = 1


class ConfigError(SubpopError):
    exit_code = 1


class DataError(SubpopError):
    exit_code = 2


class NumericError(SubpopError):
    exit_code = 3
