"""Exception types shared across the package."""


class DsNerfError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DsNerfError, ValueError):
    pass


class InvalidPoseError(InvalidInputError):
    pass


class InvalidSpecError(InvalidInputError):
    pass


class InvalidPixelError(InvalidInputError):
    pass


class InvalidIntervalError(InvalidInputError):
    pass


class MeshFormatError(InvalidInputError):
    pass


class ConfigError(InvalidInputError):
    pass


class DegenerateFaceError(DsNerfError, ArithmeticError):
    pass


class DegenerateDirectionError(DsNerfError, ArithmeticError):
    pass


class SingularTransformError(DsNerfError, ArithmeticError):
    pass


class CorrespondenceError(DsNerfError, ValueError):
    """Two posed meshes do not share face indexing."""


class EvaluationError(DsNerfError, ArithmeticError):
    """Non-finite value fed into or produced by a field."""


class UsageError(DsNerfError, RuntimeError):
    pass


class TrainingAborted(DsNerfError, RuntimeError):
    pass
