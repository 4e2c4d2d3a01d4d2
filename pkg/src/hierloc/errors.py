"""Exception types shared across hierloc."""


class HierlocError(Exception):
    """Base class for all library errors."""


class DataError(HierlocError, ValueError):
    """Input data is malformed or unusable (CLI exit code 3)."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.offset = offset


class EmptyCloudError(DataError):
    pass


class InvalidRotationError(HierlocError, ValueError):
    pass


class DegenerateGeometryError(HierlocError, ValueError):
    pass


class ConfigError(HierlocError, ValueError):
    """Invalid configuration value or file (CLI exit code 2)."""
