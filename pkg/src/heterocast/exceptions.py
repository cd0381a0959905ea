"""Error types raised by the heterocast pipeline."""


class HeterocastError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(HeterocastError):
    """A data file could not be parsed (bad cell, wrong arity)."""


class FormatError(HeterocastError):
    """A data file parsed but violates a structural rule (e.g. stride)."""


class DataError(HeterocastError):
    """Input data violates a precondition (missing column, too short)."""


class ConfigError(HeterocastError):
    """A configuration value or key is invalid."""
