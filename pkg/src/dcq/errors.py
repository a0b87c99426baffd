"""Exception taxonomy shared across the package.

Every error carries a short ``category`` tag; the CLI prints failures as
``error:<category>: <message>`` so scripts can match on the tag.
"""


class DcqError(Exception):
    category = "error"


class ArgumentError(DcqError, ValueError):
    category = "argument"


class DimensionError(DcqError, ValueError):
    category = "dimension"


class DataError(DcqError, ValueError):
    category = "data"


class ShapeError(DcqError, ValueError):
    category = "shape"


class FormatError(DcqError, ValueError):
    category = "format"


class IntegrityError(DcqError, ValueError):
    category = "integrity"


class StateError(DcqError, RuntimeError):
    category = "state"


class TrainingError(DcqError, RuntimeError):
    category = "training"


class SplitError(DcqError, ValueError):
    category = "split"


class MissingHeadError(DcqError, LookupError):
    category = "missing-head"


class IoError(DcqError, OSError):
    category = "io"
