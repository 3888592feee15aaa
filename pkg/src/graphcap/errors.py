"""Exception hierarchy shared by every graphcap module."""


class GraphcapError(Exception):
    """Base class for all errors raised by graphcap."""


class DimensionError(GraphcapError, ValueError):
    pass


class VocabularyError(GraphcapError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep plain messages
        return str(self.args[0]) if self.args else ""


class LabelSpaceError(VocabularyError):
    pass


class ConfigError(GraphcapError, ValueError):
    pass


class BatchSizeError(GraphcapError, ValueError):
    pass


class NumericError(GraphcapError, ArithmeticError):
    pass


class ValidationError(GraphcapError, ValueError):
    pass


class DataError(GraphcapError, ValueError):
    pass


class FormatError(GraphcapError, ValueError):
    pass


class CorruptionError(FormatError):
    pass
