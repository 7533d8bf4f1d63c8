"""Exception types shared across the pipeline."""


class RangeError(ValueError):
    """A coordinate or integer field is outside its representable range."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or inconsistent."""

    def __init__(self, message, *, key=None):
        self.key = key
        super().__init__(message)


class ValidationError(ValueError):
    """An input violates an operation's preconditions."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or hit a singular system."""


class ParseError(ValueError):
    """Malformed input file. Carries the line number or byte offset."""

    def __init__(self, message, *, line=None, offset=None, path=None):
        self.line = line
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
