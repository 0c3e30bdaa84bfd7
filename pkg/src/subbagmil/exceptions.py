"""Exception hierarchy.

Every error raised by the package derives from :class:`SubBagMILError` so that
callers (notably the CLI) can map failures to exit codes.
"""


class SubBagMILError(Exception):
    """Base class for all package errors."""


class DimensionError(SubBagMILError, ValueError):
    pass


class DomainError(SubBagMILError, ValueError):
    pass


class OptimizerError(SubBagMILError, FloatingPointError):
    def __init__(self, name, message="non-finite gradient"):
        super().__init__(f"{message} in parameter {name!r}")
        self.name = name


class GradCheckError(SubBagMILError):
    pass


class FormatError(SubBagMILError, ValueError):
    """Malformed bag, manifest or checkpoint file."""

    def __init__(self, message, offset=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.path = path


class ConfigError(SubBagMILError, ValueError):
    pass


class SplitError(SubBagMILError, ValueError):
    pass


class ModelError(SubBagMILError, ValueError):
    pass


class PartitionError(SubBagMILError, ValueError):
    pass


class SamplingError(SubBagMILError, ValueError):
    pass


class IntegrityError(SubBagMILError, ValueError):
    pass


class SelectionError(SubBagMILError, ValueError):
    pass


class NumericFailure(SubBagMILError, FloatingPointError):
    """Training produced a non-finite loss."""
