"""Exception taxonomy shared by the whole package.

Plain ``ValueError`` is used for bad call arguments (k out of range,
empty keep-set, zero epsilon); the classes below cover everything that
is not a simple argument mistake.
"""


class EmoeError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(EmoeError):
    """Operand dimensions do not line up."""


class ConstraintError(EmoeError):
    """A structural invariant is violated (unbalanced partition, bad
    expert index sets, converting a model that is already converted)."""


class FormatError(EmoeError):
    """A serialized file is malformed or fails validation."""


class TrainingError(EmoeError):
    """Training diverged (non-finite loss)."""
