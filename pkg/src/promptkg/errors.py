"""Exception hierarchy shared by every subsystem.

Each class carries the process exit code the CLI maps it to.
"""


class PromptKGError(Exception):
    exit_code = 1


class ConfigError(PromptKGError):
    exit_code = 2


class DimensionError(PromptKGError, ValueError):
    exit_code = 2


class ContractError(PromptKGError, RuntimeError):
    exit_code = 2


class DataError(PromptKGError):
    exit_code = 3


class ParseError(DataError, ValueError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class ReferentialIntegrityError(DataError):
    pass


class QueryIndexError(PromptKGError, IndexError):
    exit_code = 3


class NumericAbort(PromptKGError, FloatingPointError):
    exit_code = 4


class CheckpointError(PromptKGError):
    exit_code = 2
