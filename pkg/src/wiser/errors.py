"""Exception types raised across the pipeline.

The CLI maps these onto exit codes (see ``wiser.cli``).
"""


class WiserError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(WiserError, ValueError):
    pass


class ContractError(WiserError, ValueError):
    pass


class NumericError(WiserError, ArithmeticError):
    pass


class ParseError(WiserError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class DataError(WiserError, ValueError):
    pass


class ConfigError(WiserError, ValueError):
    def __init__(self, message, key=None, line=None):
        self.message = message
        self.key = key
        self.line = line
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if key is not None:
            prefix.append(f"key '{key}'")
        super().__init__(f"{', '.join(prefix)}: {message}" if prefix else message)


class ChunkError(WiserError, ValueError):
    def __init__(self, message, chunk=None):
        self.chunk = chunk
        super().__init__(message)


class MetricError(WiserError, ValueError):
    pass


class PipelineError(WiserError, RuntimeError):
    def __init__(self, message, stage=None):
        self.message = message
        self.stage = stage
        super().__init__(f"[{stage}] {message}" if stage else message)
