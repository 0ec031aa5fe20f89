"""Exception taxonomy shared by the library and the CLI.

The CLI maps these onto exit codes: invalid arguments -> 2, data/format
problems -> 3, numerical failures -> 4.
"""


class InvalidArgumentError(ValueError):
    """A caller-supplied argument violates a documented precondition."""


class DataError(Exception):
    """Input data is structurally unusable (duplicates, empty, bad values)."""


class FormatError(DataError):
    """A serialized artifact (ratings file, model file) is malformed."""


class NumericalFailureError(RuntimeError):
    """An iterative numerical scheme failed to converge."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
