"""Exception taxonomy mirrored by the CLI exit codes."""


class GadmoreError(Exception):
    """Base class for all library errors."""


class DataError(GadmoreError):
    """Malformed input: bad file contents, shape mismatches, invalid points."""


class NumericError(GadmoreError):
    """Numeric failure: non-finite inputs, exploding parameters, NaN losses."""
