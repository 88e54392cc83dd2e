"""Exception hierarchy shared by every module."""


class FactorCellError(Exception):
    """Base class for all library errors."""


class DimensionError(FactorCellError, ValueError):
    pass


class NumericError(FactorCellError, ArithmeticError):
    pass


class ConfigError(FactorCellError, ValueError):
    pass


class SchemaError(FactorCellError, ValueError):
    pass


class EncodingError(FactorCellError, ValueError):
    pass


class VocabError(FactorCellError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ParseError(FactorCellError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class EmptyDocumentError(FactorCellError, ValueError):
    pass


class FormatError(FactorCellError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


class VersionError(FormatError):
    pass


class CapabilityError(FactorCellError, ValueError):
    pass
