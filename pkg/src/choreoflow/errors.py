"""Exception types shared across choreoflow modules."""


class ChoreoflowError(Exception):
    """Base class for every domain error raised by this package."""


class ParseError(ChoreoflowError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)


class TopologyError(ChoreoflowError):
    pass


class DimensionError(ChoreoflowError):
    pass


class ShapeError(ChoreoflowError):
    pass


class DegenerateInput(ChoreoflowError):
    pass


class EmptyDataset(ChoreoflowError):
    pass


class ConfigError(ChoreoflowError):
    pass


class RangeError(ChoreoflowError):
    pass


class VocabOverflow(ChoreoflowError):
    pass


class LayoutError(ChoreoflowError):
    pass


class NonFiniteError(ChoreoflowError):
    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class InsufficientSamples(ChoreoflowError):
    pass


class EigenFailure(ChoreoflowError):
    pass


class MagicMismatch(ChoreoflowError):
    pass


class VersionUnsupported(ChoreoflowError):
    pass


class TruncatedFile(ChoreoflowError):
    def __init__(self, message, expected=None, actual=None):
        self.expected = expected
        self.actual = actual
        super().__init__(message)


class SchemaHashMismatch(ChoreoflowError):
    pass
